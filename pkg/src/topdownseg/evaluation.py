"""Hungarian-matched evaluation for unsupervised segmentation.

Predicted cluster ids carry no fixed meaning, so scoring first builds a
cluster-vs-class confusion matrix over the whole validation split and
then picks the one-to-one assignment that maximizes the number of
correctly matched pixels. With more clusters than classes the surplus
clusters stay unmatched and are discarded; their pixels still count
toward denominators (a pixel predicted into a discarded cluster is a
miss, not a free pass), just never toward a numerator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.optimize import linear_sum_assignment

IGNORE_LABEL = 255


@dataclass(frozen=True)
class ConfusionMatrix:
    """Pixel counts indexed by (predicted cluster, ground-truth class)."""

    counts: np.ndarray
    total: int

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.size == 0:
            raise ValueError("counts must be a non-empty 2-d matrix")
        if not np.issubdtype(counts.dtype, np.integer):
            raise ValueError("counts must be integers")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        counts = np.ascontiguousarray(counts, dtype=np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        if self.total != int(counts.sum()):
            raise ValueError("total does not equal the sum of counts")

    @property
    def k_pred(self) -> int:
        return self.counts.shape[0]

    @property
    def k_gt(self) -> int:
        return self.counts.shape[1]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Merge two partial accumulations over disjoint image sets."""
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        if other.counts.shape != self.counts.shape:
            raise ValueError("cannot merge confusion matrices of different shapes")
        return ConfusionMatrix(self.counts + other.counts, self.total + other.total)


@dataclass(frozen=True)
class EvalReport:
    """Matched scores. per_class_iou has one entry per ground-truth class.

    miou averages over the matched classes only; when every class is
    matched (the usual case, including over-clustering) that is the mean
    of the full list. Classes with an empty union are scored 0 and
    listed in empty_classes.
    """

    assignment: dict[int, int]
    miou: float
    pixel_acc: float
    per_class_iou: tuple[float, ...]
    empty_classes: tuple[int, ...] = field(default=())

    def __post_init__(self):
        values = (self.miou, self.pixel_acc) + tuple(self.per_class_iou)
        if not all(0.0 <= float(v) <= 1.0 for v in values):
            raise ValueError("scores must lie in [0, 1]")
        for g in self.assignment.values():
            if not 0 <= g < len(self.per_class_iou):
                raise ValueError("assignment targets a class outside the report")

    def to_text(self) -> str:
        """Tab-separated report, one metric per line."""
        lines = [f"miou\t{self.miou:.6f}", f"pixel_acc\t{self.pixel_acc:.6f}"]
        matched = {g: p for p, g in self.assignment.items()}
        for g, iou in enumerate(self.per_class_iou):
            pred = f"pred={matched[g]}" if g in matched else "unmatched"
            flag = "\tempty" if g in self.empty_classes else ""
            lines.append(f"iou\t{g}\t{iou:.6f}\t{pred}{flag}")
        return "\n".join(lines) + "\n"


def _check_grid(grid: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(grid)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{what} labels must be integers, got {arr.dtype}")
    if arr.ndim != 2:
        raise ValueError(f"{what} grid must be 2-d, got shape {arr.shape}")
    return arr


def accumulate(preds, gts, k_pred: int, k_gt: int,
               ignore: int = IGNORE_LABEL) -> ConfusionMatrix:
    """Count (pred cluster, gt class) pixel pairs over paired label grids.

    preds and gts are matching sequences of 2-d integer grids; a single
    grid may be passed bare. Pixels whose ground truth equals ignore are
    excluded entirely. Out-of-range values on either side are an error
    rather than a silent drop.
    """
    if k_pred < 1 or k_gt < 1:
        raise ValueError("k_pred and k_gt must be positive")
    if ignore < k_gt:
        raise ValueError("ignore value collides with a class id")
    if isinstance(preds, np.ndarray):
        preds = [preds]
    if isinstance(gts, np.ndarray):
        gts = [gts]
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    counts = np.zeros((k_pred, k_gt), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred = _check_grid(pred, "predicted")
        gt = _check_grid(gt, "ground-truth")
        if pred.shape != gt.shape:
            raise ValueError(
                f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
        if pred.min(initial=0) < 0 or pred.max(initial=0) >= k_pred:
            raise ValueError("predicted label outside [0, k_pred)")
        scored = gt != ignore
        g = gt[scored]
        if g.size and (g.min() < 0 or g.max() >= k_gt):
            raise ValueError("ground-truth label outside [0, k_gt)")
        pair = pred[scored].astype(np.int64) * k_gt + g.astype(np.int64)
        counts += np.bincount(pair, minlength=k_pred * k_gt).reshape(k_pred, k_gt)
    return ConfusionMatrix(counts, int(counts.sum()))


def hungarian_match(counts) -> dict[int, int]:
    """Injective pred-to-gt map of size min(K_pred, K_gt) maximizing
    the matched pixel sum. Clusters left out of the map are discarded."""
    matrix = counts.counts if isinstance(counts, ConfusionMatrix) else np.asarray(counts)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValueError("confusion matrix must be non-empty and 2-d")
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    return {int(p): int(g) for p, g in zip(rows, cols)}


def metrics(counts: ConfusionMatrix, assignment: dict[int, int]) -> EvalReport:
    """Score a confusion matrix under a pred-to-gt assignment.

    Relabeling a matched cluster p to its class g makes TP the (p, g)
    cell, FP the rest of row p, and FN the rest of column g. Unmatched
    ground-truth classes score 0. A class whose union is empty also
    scores 0 and is flagged instead of dividing by zero.
    """
    matrix = counts.counts
    inverse: dict[int, int] = {}
    for p, g in assignment.items():
        if not (0 <= p < counts.k_pred and 0 <= g < counts.k_gt):
            raise ValueError("assignment references an out-of-range index")
        if g in inverse:
            raise ValueError("assignment maps two clusters to one class")
        inverse[g] = p

    row_sums = matrix.sum(axis=1)
    col_sums = matrix.sum(axis=0)
    ious, empty, matched_sum = [], [], 0
    for g in range(counts.k_gt):
        if g not in inverse:
            ious.append(0.0)
            continue
        p = inverse[g]
        tp = int(matrix[p, g])
        union = int(row_sums[p]) + int(col_sums[g]) - tp
        matched_sum += tp
        if union == 0:
            empty.append(g)
            ious.append(0.0)
        else:
            ious.append(tp / union)
    matched_ious = [ious[g] for g in inverse]
    miou = float(np.mean(matched_ious)) if matched_ious else 0.0
    acc = matched_sum / counts.total if counts.total else 0.0
    return EvalReport(dict(assignment), miou, acc, tuple(ious), tuple(empty))


def evaluate(preds, gts, k_pred: int, k_gt: int,
             ignore: int = IGNORE_LABEL) -> EvalReport:
    """Accumulate, match, and score in one step."""
    counts = accumulate(preds, gts, k_pred, k_gt, ignore=ignore)
    return metrics(counts, hungarian_match(counts))


def remap_labels(grid: np.ndarray, table: dict[int, int],
                 ignore: int = IGNORE_LABEL) -> np.ndarray:
    """Substitute ground-truth values through table, keeping ignore as is.

    Every value present in the grid must appear in the table (or be the
    ignore value); anything else is rejected by name so a truncated
    table cannot silently corrupt an evaluation.
    """
    arr = _check_grid(grid, "ground-truth")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("labels must fit in [0, 255]")
    lut = np.full(256, -1, dtype=np.int64)
    lut[ignore] = ignore
    for old, new in table.items():
        if not (0 <= old <= 255 and 0 <= new <= 255):
            raise ValueError("remap entries must fit in [0, 255]")
        if old == ignore or new == ignore:
            raise ValueError("remap table may not touch the ignore label")
        lut[old] = new
    present = np.unique(arr)
    missing = present[lut[present] < 0]
    if missing.size:
        raise ValueError(f"value {int(missing[0])} has no remap entry")
    return lut[arr].astype(arr.dtype)


def _parse_remap(text: str, origin: str) -> dict[int, int]:
    table: dict[int, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{origin}:{lineno}: expected 'old<TAB>new', got {raw!r}")
        try:
            old, new = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(f"{origin}:{lineno}: non-integer entry {raw!r}") from None
        if old in table:
            raise ValueError(f"{origin}:{lineno}: duplicate source value {old}")
        table[old] = new
    if not table:
        raise ValueError(f"{origin}: empty remap table")
    return table


def load_remap_table(path) -> dict[int, int]:
    """Read an old<TAB>new table, one pair per line."""
    with open(path, "r", encoding="utf-8") as handle:
        return _parse_remap(handle.read(), str(path))


def lip_remap_table(target_classes: int) -> dict[int, int]:
    """Built-in label merges for the LIP human-parsing benchmark.

    The native annotation has 19 part labels plus background 0; the
    shipped tables fold it to 16 classes (left/right limb pairs merged)
    or 5 coarse regions (head, torso wear, arms, legs, feet).
    """
    if target_classes not in (16, 5):
        raise ValueError("built-in LIP merges exist for 16 or 5 classes only")
    name = f"lip_19_to_{target_classes}.tsv"
    text = resources.files("topdownseg").joinpath("data", name).read_text("utf-8")
    return _parse_remap(text, name)
