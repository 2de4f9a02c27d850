"""Concept discovery: k-means over mined crop features.

The clustering is hand-rolled because the pipeline pins down details a
library implementation leaves open: restart seeding, assignment
tie-breaking toward the lowest center index, and empty-cluster
reseeding to the farthest point. Everything runs in float64.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from topdownseg.archive import (
    ArchiveError,
    f32_words_to_int,
    int_to_f32_words,
    load_archive,
    save_archive,
)

N_RESTARTS = 10
MAX_ITER = 300
TOL = 1e-6
# The move/swap polish exists to make small-sample clustering exact; at
# this size the O(N^2 d) swap passes and per-move sweeps stop paying for
# themselves and plain Lloyd restarts take over.
POLISH_LIMIT = 512
# When the points admit at most this many distinct k-subsets, every
# subset serves as an init instead of sampling k-means++ draws.
EXHAUSTIVE_INIT_LIMIT = 64

_ROLE_CODES = {"fg": 0, "bg": 1, "any": 2}
_CODE_ROLES = {v: k for k, v in _ROLE_CODES.items()}


@dataclass
class ConceptBank:
    """Cluster centers in class-token feature space.

    vectors: (K, d) float32 centers, fg concepts first, then bg.
    roles:   per-concept group tag, "fg" / "bg" / "any".
    kmeans_seed: the seed concept discovery ran with.
    """

    vectors: np.ndarray
    roles: list[str]
    kmeans_seed: int

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be (K, d), got {self.vectors.shape}")
        if len(self.roles) != self.vectors.shape[0]:
            raise ValueError(
                f"{len(self.roles)} roles for {self.vectors.shape[0]} vectors"
            )
        for role in self.roles:
            if role not in _ROLE_CODES:
                raise ValueError(f"unknown role {role!r}")

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # |x - c|^2 via the inner-product expansion; O(N k d) through GEMM
    # without materializing an (N, k, d) difference tensor.
    d2 = (
        (points ** 2).sum(axis=1)[:, None]
        + (centers ** 2).sum(axis=1)[None, :]
        - 2.0 * points @ centers.T
    )
    return np.maximum(d2, 0.0)


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. ties go to the lowest index.
    return np.argmin(_squared_distances(points, centers), axis=1)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining mass collapsed onto chosen centers; fall back
            # to a uniform pick so init still yields k centers.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, float]:
    assignments = _assign(points, centers)
    for _ in range(MAX_ITER):
        assignments = _reseed_empty(points, centers, assignments, k)
        new_centers = np.empty_like(centers)
        for c in range(k):
            members = points[assignments == c]
            new_centers[c] = members.mean(axis=0)
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        new_assignments = _assign(points, centers)
        if np.array_equal(new_assignments, assignments) and shift <= TOL:
            assignments = new_assignments
            break
        assignments = new_assignments
    assignments = _reseed_empty(points, centers, assignments, k)
    inertia = float(
        ((points - centers[assignments]) ** 2).sum()
    )
    return centers, assignments, inertia


def _first_variation(
    points: np.ndarray, centers: np.ndarray, assignments: np.ndarray, k: int
) -> bool:
    """Sweep of single-point moves that strictly lower inertia.

    Moving x from cluster a (size na) to b (size nb) changes inertia by
    nb/(nb+1) * |x - cb|^2 - na/(na-1) * |x - ca|^2. Each step applies
    the best move over all (point, target) pairs, recomputes the two
    touched centroids exactly, and refreshes only their distance
    columns; the sweep continues until no move improves. Returns True
    when any move fired. Lloyd alone stalls in fixpoints that a single
    reassignment escapes, and the tiny-instance global-optimum
    guarantee needs those escapes.
    """
    n = points.shape[0]
    rows = np.arange(n)
    counts = np.bincount(assignments, minlength=k).astype(np.float64)
    d2 = _squared_distances(points, centers)
    moved = False
    for _ in range(max(n * 4, 16)):
        own = d2[rows, assignments]
        safe = np.maximum(counts[assignments] - 1.0, 1.0)
        gain = counts[assignments] / safe * own
        delta = counts[None, :] / (counts[None, :] + 1.0) * d2 - gain[:, None]
        delta[rows, assignments] = np.inf
        delta[counts[assignments] <= 1] = np.inf  # never empty a cluster
        flat = int(np.argmin(delta))
        if not float(delta.reshape(-1)[flat]) < -1e-12:
            break
        i, b = divmod(flat, k)
        a = int(assignments[i])
        assignments[i] = b
        counts[a] -= 1.0
        counts[b] += 1.0
        for c in (a, b):
            centers[c] = points[assignments == c].mean(axis=0)
            d2[:, c] = np.maximum(
                ((points - centers[c]) ** 2).sum(axis=1), 0.0
            )
        moved = True
    return moved


def _best_swap(
    points: np.ndarray, centers: np.ndarray, assignments: np.ndarray, k: int
) -> bool:
    """Apply the best inertia-lowering exchange of two points, if any.

    Swapping x_i (cluster a) with x_j (cluster b) keeps cluster sizes
    fixed and changes inertia by exactly
        -2 (c_a - c_b) . (x_j - x_i) - |x_j - x_i|^2 (1/n_a + 1/n_b).
    Single moves cannot escape fixpoints whose improvement needs an
    exchange (interleaved optima), so this closes that gap on small
    inputs.
    """
    counts = np.bincount(assignments, minlength=k).astype(np.float64)
    best_delta = -1e-12
    best_pair: tuple[int, int] | None = None
    idx_by_cluster = [np.flatnonzero(assignments == c) for c in range(k)]
    for a in range(k):
        ia = idx_by_cluster[a]
        if ia.size == 0:
            continue
        xa = points[ia]
        for b in range(a + 1, k):
            ib = idx_by_cluster[b]
            if ib.size == 0:
                continue
            xb = points[ib]
            cross = xb[None, :, :] - xa[:, None, :]  # x_j - x_i
            lin = -2.0 * cross @ (centers[a] - centers[b])
            quad = -(cross ** 2).sum(axis=2) * (1.0 / counts[a] + 1.0 / counts[b])
            delta = lin + quad
            flat = int(np.argmin(delta))
            val = float(delta.reshape(-1)[flat])
            if val < best_delta:
                best_delta = val
                best_pair = (int(ia[flat // ib.size]), int(ib[flat % ib.size]))
    if best_pair is None:
        return False
    i, j = best_pair
    assignments[i], assignments[j] = assignments[j], assignments[i]
    for c in set((int(assignments[i]), int(assignments[j]))):
        centers[c] = points[assignments == c].mean(axis=0)
    return True


def _refine(points: np.ndarray, centers: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Alternate Lloyd with first-variation polish until neither moves.

    Each accepted change strictly lowers inertia over finitely many
    partitions, so this terminates; the cap is just a backstop. On
    small inputs the result is a Lloyd fixpoint (assignments are
    nearest-center) that no single move and no pairwise exchange
    improves; past POLISH_LIMIT points only Lloyd runs.
    """
    centers, assignments, inertia = _lloyd(points, centers, k)
    if points.shape[0] > POLISH_LIMIT or k < 2:
        return centers, assignments, inertia
    for _ in range(MAX_ITER):
        changed = _first_variation(points, centers, assignments, k)
        if not changed:
            changed = _best_swap(points, centers, assignments, k)
        if not changed:
            break
        centers, assignments, inertia = _lloyd(points, centers, k)
    return centers, assignments, inertia


def _reseed_empty(
    points: np.ndarray, centers: np.ndarray, assignments: np.ndarray, k: int
) -> np.ndarray:
    """Move the farthest point into each empty cluster, in index order."""
    for c in range(k):
        if np.any(assignments == c):
            continue
        dist = ((points - centers[assignments]) ** 2).sum(axis=1)
        # Forbid stealing a point that is alone in its cluster, which
        # would just move the hole elsewhere.
        counts = np.bincount(assignments, minlength=k)
        movable = counts[assignments] > 1
        if not movable.any():
            continue
        dist = np.where(movable, dist, -np.inf)
        idx = int(np.argmax(dist))  # ties: lowest point index
        centers[c] = points[idx]
        assignments[idx] = c
    return assignments


def kmeans(
    points: np.ndarray, k: int, seed: int
) -> tuple[np.ndarray, np.ndarray, float]:
    """Deterministic k-means with k-means++ restarts.

    Returns (centers (k, d), assignments (N,), inertia). Runs N_RESTARTS
    independent k-means++ initializations with seeds derived from
    ``seed``, refines each with Lloyd plus a first-variation polish, and
    keeps the lowest inertia, breaking ties toward the earliest restart.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"points must be (N, d), got shape {pts.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if pts.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {pts.shape[0]}")
    if not np.isfinite(pts).all():
        raise ValueError("points contain non-finite values")

    best: tuple[np.ndarray, np.ndarray, float] | None = None
    for centers in _initial_centers(pts, k, seed):
        centers, assignments, inertia = _refine(pts, centers.copy(), k)
        if best is None or inertia < best[2] - 1e-12:
            best = (centers, assignments, inertia)
    return best


def _initial_centers(pts: np.ndarray, k: int, seed: int):
    """Initialization schedule: exhaustive on tiny inputs, sampled otherwise.

    k-means++ sampling approximates trying every distinct center subset;
    when that enumeration is actually affordable it is used directly
    (the tiny-instance global-optimum guarantee depends on it), in
    lexicographic order so the run stays deterministic. Larger inputs
    get N_RESTARTS k-means++ draws with seeds derived from ``seed``.
    """
    n = pts.shape[0]
    if math.comb(n, k) <= EXHAUSTIVE_INIT_LIMIT:
        for subset in itertools.combinations(range(n), k):
            yield pts[list(subset)]
        return
    for restart in range(N_RESTARTS):
        rng = np.random.default_rng([seed, restart])
        yield _plusplus_init(pts, k, rng)


def discover(
    fg_features: np.ndarray,
    bg_features: np.ndarray,
    k_fg: int | None = None,
    k_bg: int | None = None,
    k: int | None = None,
    seed: int = 0,
    fg_role: str = "fg",
    bg_role: str = "bg",
) -> ConceptBank:
    """Cluster crop features per group and concatenate fg then bg centers.

    Either pass explicit per-group counts, or a total ``k`` that is split
    proportionally to group sizes (every non-empty group keeps at least
    one concept). A group that must produce concepts but has no features
    is rejected by name.
    """
    fg = np.asarray(fg_features, dtype=np.float64).reshape(len(fg_features), -1) \
        if len(fg_features) else np.zeros((0, 0))
    bg = np.asarray(bg_features, dtype=np.float64).reshape(len(bg_features), -1) \
        if len(bg_features) else np.zeros((0, 0))

    if k_fg is None and k_bg is None:
        if k is None:
            raise ValueError("pass k or explicit k_fg/k_bg")
        k_fg, k_bg = _proportional_split(k, len(fg), len(bg))
    elif k_fg is None or k_bg is None:
        raise ValueError("pass both k_fg and k_bg, or neither")
    if k is not None and k != k_fg + k_bg:
        raise ValueError(f"k={k} but k_fg + k_bg = {k_fg + k_bg}")
    if k_fg < 0 or k_bg < 0 or k_fg + k_bg < 1:
        raise ValueError(f"invalid split k_fg={k_fg}, k_bg={k_bg}")

    parts: list[np.ndarray] = []
    roles: list[str] = []
    for group_name, feats, count, role in (
        ("fg", fg, k_fg, fg_role),
        ("bg", bg, k_bg, bg_role),
    ):
        if count == 0:
            continue
        if feats.shape[0] == 0:
            raise ValueError(
                f"group {group_name!r} has no crops but needs {count} concepts"
            )
        if feats.shape[0] < count:
            raise ValueError(
                f"group {group_name!r} has {feats.shape[0]} crops, fewer than k={count}"
            )
        group_seed = 2 * seed if group_name == "fg" else 2 * seed + 1
        centers, _, _ = kmeans(feats, count, group_seed)
        parts.append(centers)
        roles.extend([role] * count)
    vectors = np.concatenate(parts, axis=0)
    return ConceptBank(vectors=vectors.astype(np.float32), roles=roles, kmeans_seed=seed)


def _proportional_split(k: int, n_fg: int, n_bg: int) -> tuple[int, int]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n_fg == 0 and n_bg == 0:
        raise ValueError("no crop features in either group")
    if n_bg == 0:
        return k, 0
    if n_fg == 0:
        return 0, k
    if k < 2:
        raise ValueError(
            f"k={k} cannot give every non-empty group at least one concept"
        )
    k_fg = int(round(k * n_fg / (n_fg + n_bg)))
    k_fg = min(max(k_fg, 1), k - 1)
    return k_fg, k - k_fg


def save_bank(bank: ConceptBank, path: str | Path) -> None:
    save_archive(
        path,
        {
            "concepts.vectors": bank.vectors,
            "concepts.roles": np.asarray(
                [_ROLE_CODES[r] for r in bank.roles], dtype=np.float32
            ),
            "concepts.kmeans_seed": int_to_f32_words(bank.kmeans_seed),
        },
    )


def load_bank(path: str | Path) -> ConceptBank:
    tensors = load_archive(path)
    try:
        vectors = tensors["concepts.vectors"]
        role_codes = tensors["concepts.roles"]
        seed_words = tensors["concepts.kmeans_seed"]
    except KeyError as exc:
        raise ArchiveError(f"{path}: missing concept tensor {exc}") from exc
    roles = []
    for code in role_codes.astype(np.int64):
        if int(code) not in _CODE_ROLES:
            raise ArchiveError(f"{path}: unknown role code {code}")
        roles.append(_CODE_ROLES[int(code)])
    return ConceptBank(
        vectors=vectors,
        roles=roles,
        kmeans_seed=f32_words_to_int(seed_words),
    )
