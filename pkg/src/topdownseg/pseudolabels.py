"""Concept-to-pixel response maps and pseudo-label synthesis.

Each concept vector is projected into pixel space by differentiating a
similarity objective against the encoder's class-attention row and
adding the gradient back onto the attention map. The per-concept
response grids are jointly min-max normalized per image, optionally
extended with a thresholded background channel, reduced by argmax, and
upsampled (nearest) to image resolution. Labels and response grids
persist in a directory-backed bank so training never re-runs the
encoder.

Bank record layout (little-endian throughout):

    u16  id_len, then id_len bytes of UTF-8 image id
    u32  K, u32 h, u32 w      response grid geometry
    u32  H, u32 W             label geometry
    u32  flags                bit 0: background channel present
                              bit 1: label block is u16 (else u8)
    f16  responses            K*h*w values, C order
    f16  background           h*w values, only when bit 0 is set
    u8/u16 label              H*W values

The index file ``index.tsv`` holds one ``id<TAB>path<TAB>crc32`` line
per record, sorted by id, with paths relative to the bank directory and
crc32 computed over the whole record file.
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from topdownseg.concepts import ConceptBank
from topdownseg.encoder import VisionEncoder, attention_grad
from topdownseg.imutil import resize_bilinear, resize_nearest

T_BG = 0.1
IGNORE_LABEL = 255

_FLAG_BG = 1
_FLAG_U16 = 2
_HEADER = struct.Struct("<IIIIII")


class BankError(Exception):
    """Malformed bank state: duplicate ids, bad records, broken index."""


class ChecksumError(BankError):
    """Record bytes do not match the checksum stored in the index."""


@dataclass
class PseudoLabel:
    """Per-image synthesized supervision.

    responses: (K, h, w) float32 response grids, already normalized
    label:     (H, W) integer grid; 255 is reserved for ignore
    bg:        (h, w) float32 background channel, present only when the
               label's class 0 means background
    """

    responses: np.ndarray
    label: np.ndarray
    bg: np.ndarray | None = field(default=None)
    image_id: str = field(default="")

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=np.float32)
        if self.responses.ndim != 3:
            raise ValueError(
                f"responses must be (K, h, w), got {self.responses.shape}"
            )
        if not np.isfinite(self.responses).all():
            raise ValueError("responses contain non-finite values")
        self.label = np.asarray(self.label)
        if self.label.ndim != 2:
            raise ValueError(f"label must be (H, W), got {self.label.shape}")
        if self.label.dtype not in (np.uint8, np.uint16):
            raise ValueError(f"label dtype must be uint8/uint16, got {self.label.dtype}")
        n_classes = self.responses.shape[0] + (1 if self.bg is not None else 0)
        values = np.unique(self.label)
        bad = values[(values >= n_classes) & (values != IGNORE_LABEL)]
        if bad.size:
            raise ValueError(
                f"label values {bad.tolist()} outside [0, {n_classes - 1}] + ignore"
            )
        if self.bg is not None:
            self.bg = np.asarray(self.bg, dtype=np.float32)
            if self.bg.shape != self.responses.shape[1:]:
                raise ValueError(
                    f"bg shape {self.bg.shape} != response grid {self.responses.shape[1:]}"
                )

    @property
    def k(self) -> int:
        return self.responses.shape[0]


def gradcam_response(
    model: VisionEncoder, image: np.ndarray, bank: ConceptBank, k: int
) -> np.ndarray:
    """Response grid (h, w) of concept ``k`` on one encoder-sized image.

    The objective is the (negated) similarity loss 1 - cls . S_k / sqrt(d);
    its gradient with respect to the class-attention row is added back
    onto the row itself. A concept with no influence on the objective
    (e.g. the zero vector) contributes a zero gradient, so the response
    degenerates to the plain attention map.
    """
    if not 0 <= k < bank.k:
        raise ValueError(f"concept index {k} out of range for bank of {bank.k}")
    vec = torch.from_numpy(bank.vectors[k].astype(np.float64))
    scale = 1.0 / np.sqrt(bank.dim)
    seen: dict[str, np.ndarray] = {}

    def objective(view):
        seen["attention"] = view.cls_attention.detach().cpu().numpy()
        similarity = (view.cls.double() * vec).sum() * scale
        return -(1.0 - similarity)

    grad, _ = attention_grad(model, image, objective)
    return grad + seen["attention"].astype(np.float64)


def gradcam_responses(
    model: VisionEncoder, image: np.ndarray, bank: ConceptBank
) -> np.ndarray:
    """Stack gradcam_response over every concept: (K, h, w) float64."""
    return np.stack(
        [gradcam_response(model, image, bank, k) for k in range(bank.k)]
    )


def normalize_responses(responses: np.ndarray) -> np.ndarray:
    """Min-max normalize all channels jointly into [0, 1].

    The background threshold and the teacher aggregation both treat
    responses as probabilities, so one shared affine map per image is
    applied across every channel. A constant stack maps to zeros.
    """
    arr = np.asarray(responses, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("responses contain non-finite values")
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def build_pseudo_label(
    responses: np.ndarray,
    roles: list[str],
    image_hw: tuple[int, int],
    patch_is_fg: bool | None = None,
    fg_only: bool = False,
    t_bg: float = T_BG,
    image_id: str = "",
) -> PseudoLabel:
    """Reduce normalized responses to an argmax label at image resolution.

    responses:   (K, h, w), already normalized into [0, 1]
    roles:       per-channel group tag ("fg"/"bg"/"any")
    patch_is_fg: crop-level override; True zeroes bg-role channels,
                 False zeroes fg-role channels, None leaves all intact
    fg_only:     prepend a background channel relu(t_bg - max_k) as
                 class 0, shifting concept classes to 1..K

    Ties break toward the lower class index. The grid-level argmax is
    upsampled to ``image_hw`` by nearest cell center.
    """
    arr = np.asarray(responses, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"responses must be (K, h, w), got {arr.shape}")
    if len(roles) != arr.shape[0]:
        raise ValueError(f"{len(roles)} roles for {arr.shape[0]} channels")
    if not np.isfinite(arr).all():
        raise ValueError("responses contain non-finite values")
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6):
        raise ValueError("responses must be normalized into [0, 1]")
    if patch_is_fg is not None:
        drop = "bg" if patch_is_fg else "fg"
        mask = np.array([role == drop for role in roles])
        arr = arr.copy()
        arr[mask] = 0.0
    bg = None
    if fg_only:
        bg = np.maximum(t_bg - arr.max(axis=0), 0.0)
        stack = np.concatenate([bg[None], arr], axis=0)
    else:
        stack = arr
    grid = np.argmax(stack, axis=0)
    n_classes = stack.shape[0]
    dtype = np.uint8 if n_classes - 1 < IGNORE_LABEL else np.uint16
    label = resize_nearest(grid, image_hw).astype(dtype)
    return PseudoLabel(
        responses=arr,
        label=label,
        bg=bg,
        image_id=image_id,
    )


def synthesize_pseudo_label(
    model: VisionEncoder,
    bank: ConceptBank,
    image: np.ndarray,
    image_id: str,
    fg_only: bool,
    t_bg: float = T_BG,
) -> PseudoLabel:
    """Whole-image pipeline: resize, respond, normalize, reduce.

    ``image`` is (H, W, 3) float in [0, 1] at native resolution; the
    encoder sees a bilinearly resized copy, the label comes back at the
    native (H, W). No crop-level role override applies here.
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    side = model.config.image_size
    encoder_view = np.clip(resize_bilinear(arr, (side, side)), 0.0, 1.0)
    raw = gradcam_responses(model, encoder_view, bank)
    return build_pseudo_label(
        normalize_responses(raw),
        roles=list(bank.roles),
        image_hw=arr.shape[:2],
        fg_only=fg_only,
        t_bg=t_bg,
        image_id=image_id,
    )


def roi_align_label(
    responses: np.ndarray,
    rect: tuple[float, float, float, float],
    target_hw: tuple[int, int] | None = None,
) -> np.ndarray:
    """Bilinearly crop (K, h, w) responses to a box in grid coordinates.

    ``rect`` is (x0, y0, x1, y1) in continuous cell-edge coordinates,
    so the full grid is (0, 0, w, h). Each output cell samples the box
    at its half-pixel center with clamped borders; a box aligned to the
    integer grid whose target equals its span reproduces plain slicing
    bit for bit. Default target is half the grid per axis.
    """
    arr = np.asarray(responses, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"responses must be (K, h, w), got {arr.shape}")
    h, w = arr.shape[1:]
    x0, y0, x1, y1 = (float(v) for v in rect)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rect {rect}")
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"rect {rect} outside grid {h}x{w}")
    if target_hw is None:
        target_hw = (max(h // 2, 1), max(w // 2, 1))
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {target_hw}")

    def axis(lo: float, hi: float, n: int, size: int):
        centers = lo + (np.arange(n) + 0.5) * ((hi - lo) / n) - 0.5
        base = np.floor(centers).astype(np.int64)
        frac = centers - base
        return (
            np.clip(base, 0, size - 1),
            np.clip(base + 1, 0, size - 1),
            frac,
        )

    ry0, ry1, fy = axis(y0, y1, th, h)
    cx0, cx1, fx = axis(x0, x1, tw, w)
    rows = arr[:, ry0, :] * (1.0 - fy)[None, :, None] + arr[:, ry1, :] * fy[None, :, None]
    out = rows[:, :, cx0] * (1.0 - fx) + rows[:, :, cx1] * fx
    return out


def _record_bytes(pl: PseudoLabel) -> bytes:
    """Serialize one record; see the module docstring for the layout."""
    ident = pl.image_id.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise BankError(f"image id too long ({len(ident)} bytes)")
    flags = 0
    if pl.bg is not None:
        flags |= _FLAG_BG
    if pl.label.dtype == np.uint16:
        flags |= _FLAG_U16
    k, h, w = pl.responses.shape
    hh, ww = pl.label.shape
    parts = [
        struct.pack("<H", len(ident)),
        ident,
        _HEADER.pack(k, h, w, hh, ww, flags),
        np.ascontiguousarray(pl.responses.astype("<f2")).tobytes(),
    ]
    if pl.bg is not None:
        parts.append(np.ascontiguousarray(pl.bg.astype("<f2")).tobytes())
    label_dtype = "<u2" if pl.label.dtype == np.uint16 else "u1"
    parts.append(np.ascontiguousarray(pl.label.astype(label_dtype)).tobytes())
    return b"".join(parts)


def _parse_record(raw: bytes, path: Path) -> PseudoLabel:
    try:
        (id_len,) = struct.unpack_from("<H", raw, 0)
        offset = 2 + id_len
        ident = raw[2:offset].decode("utf-8")
        k, h, w, hh, ww, flags = _HEADER.unpack_from(raw, offset)
        offset += _HEADER.size
        responses = np.frombuffer(raw, "<f2", k * h * w, offset).reshape(k, h, w)
        offset += responses.nbytes
        bg = None
        if flags & _FLAG_BG:
            bg = np.frombuffer(raw, "<f2", h * w, offset).reshape(h, w)
            offset += bg.nbytes
        label_dtype = "<u2" if flags & _FLAG_U16 else "u1"
        label = np.frombuffer(raw, label_dtype, hh * ww, offset).reshape(hh, ww)
        offset += label.nbytes
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise BankError(f"malformed record {path}: {exc}") from exc
    if offset != len(raw):
        raise BankError(f"record {path} has {len(raw) - offset} trailing bytes")
    return PseudoLabel(
        responses=responses.astype(np.float32),
        label=label.astype(label.dtype.newbyteorder("=")),
        bg=None if bg is None else bg.astype(np.float32),
        image_id=ident,
    )


def _safe_stem(image_id: str, taken: set[str]) -> str:
    stem = re.sub(r"[^A-Za-z0-9._-]", "_", image_id) or "record"
    candidate = stem
    suffix = 1
    while candidate in taken:
        candidate = f"{stem}.{suffix}"
        suffix += 1
    return candidate


class LabelBank:
    """Directory of pseudo-label records plus a checksum index.

    The index is rewritten whole on every put, sorted by image id, so a
    bank built in any insertion order serializes identically.
    """

    INDEX_NAME = "index.tsv"

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._entries: dict[str, tuple[str, int]] = {}
        index = self.directory / self.INDEX_NAME
        if index.exists():
            self._entries = self._parse_index(index.read_text(encoding="utf-8"))

    def _parse_index(self, text: str) -> dict[str, tuple[str, int]]:
        entries: dict[str, tuple[str, int]] = {}
        for line_no, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise BankError(f"index line {line_no} is not id<TAB>path<TAB>crc32")
            ident, rel, crc = parts
            if ident in entries:
                raise BankError(f"index repeats id {ident!r}")
            try:
                entries[ident] = (rel, int(crc))
            except ValueError as exc:
                raise BankError(f"index line {line_no}: bad crc {crc!r}") from exc
        return entries

    def _write_index(self) -> None:
        lines = [
            f"{ident}\t{rel}\t{crc}"
            for ident, (rel, crc) in sorted(self._entries.items())
        ]
        path = self.directory / self.INDEX_NAME
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def put(self, pl: PseudoLabel) -> None:
        if not pl.image_id:
            raise BankError("pseudo label has no image id")
        if pl.image_id in self._entries:
            raise BankError(f"bank already holds id {pl.image_id!r}")
        taken = {rel[: -len(".rec")] for rel, _ in self._entries.values()}
        rel = _safe_stem(pl.image_id, taken) + ".rec"
        raw = _record_bytes(pl)
        (self.directory / rel).write_bytes(raw)
        self._entries[pl.image_id] = (rel, zlib.crc32(raw))
        self._write_index()

    def get(self, image_id: str) -> PseudoLabel:
        if image_id not in self._entries:
            raise KeyError(image_id)
        rel, crc = self._entries[image_id]
        path = self.directory / rel
        if not path.exists():
            raise BankError(f"record file {rel} missing for id {image_id!r}")
        raw = path.read_bytes()
        if zlib.crc32(raw) != crc:
            raise ChecksumError(f"record {rel} fails its crc32 check")
        pl = _parse_record(raw, path)
        if pl.image_id != image_id:
            raise BankError(
                f"record {rel} holds id {pl.image_id!r}, index says {image_id!r}"
            )
        return pl

    def scan_records(self) -> dict[str, tuple[str, int]]:
        """Recompute index entries by reading every record file."""
        entries: dict[str, tuple[str, int]] = {}
        for path in sorted(self.directory.glob("*.rec")):
            raw = path.read_bytes()
            pl = _parse_record(raw, path)
            if pl.image_id in entries:
                raise BankError(f"two records claim id {pl.image_id!r}")
            entries[pl.image_id] = (path.name, zlib.crc32(raw))
        return entries

    def rebuild_index(self) -> None:
        """Regenerate index.tsv from the record files on disk."""
        self._entries = self.scan_records()
        self._write_index()
