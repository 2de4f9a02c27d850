"""Dataset plumbing: manifests, mask rasters, and a synthetic generator.

A dataset is described by a line-oriented manifest. Header lines start
with "#" and carry dataset-level settings; every other line is one
sample, "image_path<TAB>mask_path<TAB>split" with "-" standing in for a
missing mask and split one of train/val. Paths are kept relative to the
manifest file so a dataset directory can be moved wholesale.

The protocol field tells the pipeline how to treat background:

    things_only       gt labels foreground classes 1..K with 0 = background;
                      segmentation gets a dedicated background channel.
    things_and_stuff  every gt class is a first-class segment target.
    no_fg_bg          as above, and crop mining skips foreground roles.

The synthetic generator draws 1 to 3 flat-colored shapes over a smooth
textured background. Masks are produced from the exact same footprint
grids as the drawn pixels, so raster and ground truth are aligned by
construction rather than by a second rasterization pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from topdownseg.imutil import resize_bilinear

IGNORE_LABEL = 255
PROTOCOLS = ("things_only", "things_and_stuff", "no_fg_bg")
SPLITS = ("train", "val")
SHAPE_KINDS = ("disk", "square", "triangle")

# Shape size as a fraction of the image side. Shapes are placed fully
# inside the frame so analytic area formulas apply without clipping.
MIN_SHAPE_FRAC = 0.10
MAX_SHAPE_FRAC = 0.24

DEFAULT_PALETTE = (
    (0.85, 0.15, 0.15),
    (0.15, 0.65, 0.20),
    (0.20, 0.30, 0.85),
    (0.90, 0.75, 0.10),
    (0.60, 0.20, 0.70),
    (0.10, 0.70, 0.75),
)


class DatasetError(Exception):
    """Manifest or raster content that cannot be used."""


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str | None
    split: str

    def __post_init__(self):
        if not self.image_path:
            raise ValueError("entry needs an image path")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    """Parsed manifest. root is where relative paths resolve from."""

    entries: tuple[ManifestEntry, ...]
    protocol: str
    k: int
    remap: str | None = None
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for entry in self.entries:
            if entry.image_path in seen:
                raise ValueError(f"duplicate image id {entry.image_path!r}")
            seen.add(entry.image_path)

    def split_entries(self, split: str) -> tuple[ManifestEntry, ...]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return tuple(e for e in self.entries if e.split == split)

    def resolve(self, relative: str) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / relative

    def __len__(self) -> int:
        return len(self.entries)


def _parse_header(line: str, lineno: int, origin: str) -> tuple[str, str]:
    parts = line[1:].split("\t")
    if len(parts) != 2:
        raise DatasetError(f"{origin}:{lineno}: header must be '#key<TAB>value'")
    return parts[0], parts[1]


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; every referenced file must exist."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent
    headers: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    for lineno, raw in enumerate(path.read_text("utf-8").splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            key, value = _parse_header(line, lineno, path.name)
            if key not in ("protocol", "k", "remap"):
                raise DatasetError(f"{path.name}:{lineno}: unknown header {key!r}")
            if key in headers:
                raise DatasetError(f"{path.name}:{lineno}: duplicate header {key!r}")
            headers[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(
                f"{path.name}:{lineno}: expected 'image<TAB>mask<TAB>split'")
        image_rel, mask_rel, split = parts
        if split not in SPLITS:
            raise DatasetError(f"{path.name}:{lineno}: bad split tag {split!r}")
        mask: str | None = None if mask_rel == "-" else mask_rel
        if not (root / image_rel).is_file():
            raise DatasetError(f"{path.name}:{lineno}: missing image {root / image_rel}")
        if mask is not None and not (root / mask).is_file():
            raise DatasetError(f"{path.name}:{lineno}: missing mask {root / mask}")
        entries.append(ManifestEntry(image_rel, mask, split))
    for required in ("protocol", "k"):
        if required not in headers:
            raise DatasetError(f"{path.name}: missing required header {required!r}")
    try:
        k = int(headers["k"])
    except ValueError:
        raise DatasetError(f"{path.name}: header k must be an integer") from None
    remap = headers.get("remap")
    if remap is not None and not (root / remap).is_file():
        raise DatasetError(f"{path.name}: missing remap table {root / remap}")
    try:
        return DatasetManifest(tuple(entries), headers["protocol"], k, remap, root)
    except ValueError as err:
        raise DatasetError(f"{path.name}: {err}") from None


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write the manifest in its canonical text form."""
    lines = [f"#protocol\t{manifest.protocol}", f"#k\t{manifest.k}"]
    if manifest.remap is not None:
        lines.append(f"#remap\t{manifest.remap}")
    for entry in manifest.entries:
        mask = entry.mask_path if entry.mask_path is not None else "-"
        lines.append(f"{entry.image_path}\t{mask}\t{entry.split}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_mask(grid: np.ndarray, path) -> None:
    """Store a label grid as a single-channel 8-bit raster."""
    arr = np.asarray(grid)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("mask values must be integers")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("mask values must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    """Load a label grid written by write_mask."""
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DatasetError(f"mask {path} is not single-channel 8-bit ({img.mode})")
            return np.asarray(img, dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetError(f"mask not found: {path}") from None
    except UnidentifiedImageError:
        raise DatasetError(f"cannot decode mask: {path}") from None


def write_image(image: np.ndarray, path) -> None:
    """Store an (H, W, 3) float image in [0, 1] as 8-bit RGB."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    quantized = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Load an RGB image as float64 (H, W, 3) in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
    except FileNotFoundError:
        raise DatasetError(f"image not found: {path}") from None
    except UnidentifiedImageError:
        raise DatasetError(f"cannot decode image: {path}") from None
    return np.asarray(rgb, dtype=np.float64) / 255.0


@dataclass(frozen=True)
class SynthConfig:
    count: int = 60
    side: int = 64
    k_gt: int = 3
    kinds: tuple[str, ...] = SHAPE_KINDS
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    noise: float = 0.04
    min_shapes: int = 1
    max_shapes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.side < 16:
            raise ValueError("side must be at least 16")
        for kind in self.kinds:
            if kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {kind!r}")
        if not 1 <= self.k_gt <= len(self.kinds):
            raise ValueError("k_gt must not exceed the number of shape kinds")
        if self.k_gt > len(self.palette):
            raise ValueError("k_gt must not exceed the palette size")
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")


def shape_footprint(kind: str, hw: tuple[int, int], center: tuple[float, float],
                    size: float) -> np.ndarray:
    """Boolean pixel-center membership grid for one shape.

    size is the disk radius, the square half-side, or the triangle
    half-height/half-base. Pixel (y, x) is inside when its integer
    center satisfies the shape's analytic inequality.
    """
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}")
    if size <= 0:
        raise ValueError("size must be positive")
    h, w = hw
    cy, cx = center
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    if kind == "square":
        return (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
    # upright triangle: apex above center, base corners below
    verts = ((cy - size, cx), (cy + size, cx - size), (cy + size, cx + size))
    signs = []
    for (ay, ax), (by, bx) in zip(verts, verts[1:] + verts[:1]):
        signs.append((bx - ax) * (yy - ay) - (by - ay) * (xx - ax))
    pos = (signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)
    neg = (signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0)
    return pos | neg


def _background(rng: np.random.Generator, side: int) -> np.ndarray:
    """Smooth low-contrast texture around mid gray."""
    coarse = rng.uniform(-1.0, 1.0, size=(4, 4, 3))
    layers = [resize_bilinear(coarse[:, :, c], (side, side)) for c in range(3)]
    return np.clip(0.42 + 0.08 * np.stack(layers, axis=2), 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Render the shapes dataset into out_dir and write its manifest.

    Every image gets its own seed stream derived from (cfg.seed, index),
    so outputs are byte-identical per seed regardless of generation
    order. The first shape of image i has class (i mod k_gt) + 1 and
    every fourth image goes to the val split, which together guarantee
    each class reaches both splits once there are enough images.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    lo = MIN_SHAPE_FRAC * cfg.side
    hi = MAX_SHAPE_FRAC * cfg.side
    for i in range(cfg.count):
        rng = np.random.default_rng([cfg.seed, i])
        image = _background(rng, cfg.side)
        mask = np.zeros((cfg.side, cfg.side), dtype=np.uint8)
        n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        classes = [i % cfg.k_gt + 1]
        classes += [int(rng.integers(1, cfg.k_gt + 1)) for _ in range(n_shapes - 1)]
        for cls in classes:
            size = float(rng.uniform(lo, hi))
            margin = size + 1.0
            center = (float(rng.uniform(margin, cfg.side - margin)),
                      float(rng.uniform(margin, cfg.side - margin)))
            inside = shape_footprint(cfg.kinds[cls - 1], (cfg.side, cfg.side),
                                     center, size)
            image[inside] = cfg.palette[cls - 1]
            mask[inside] = cls
        if cfg.noise > 0:
            image = image + rng.uniform(-cfg.noise, cfg.noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0)
        name = f"{i:04d}.png"
        write_image(image, out / "images" / name)
        write_mask(mask, out / "masks" / name)
        split = "val" if i % 4 == 3 else "train"
        entries.append(ManifestEntry(f"images/{name}", f"masks/{name}", split))
    manifest = DatasetManifest(tuple(entries), "things_only", cfg.k_gt, None, out)
    save_manifest(manifest, out / "manifest.tsv")
    return manifest
