import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import disk_area
from topdownseg.datasets import (
    MAX_SHAPE_FRAC,
    MIN_SHAPE_FRAC,
    DatasetError,
    DatasetManifest,
    ManifestEntry,
    SynthConfig,
    generate_synthetic,
    load_manifest,
    read_image,
    read_mask,
    save_manifest,
    shape_footprint,
    write_image,
    write_mask,
)


def _touch(root: Path, *names: str) -> None:
    for name in names:
        target = root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        if name.endswith(".png"):
            write_mask(np.zeros((4, 4), dtype=np.uint8), target)
        else:
            target.write_text("", encoding="utf-8")


class TestManifest:
    def test_save_load_round_trip(self, tmp_path):
        _touch(tmp_path, "a.png", "a_mask.png", "b.png")
        manifest = DatasetManifest(
            (ManifestEntry("a.png", "a_mask.png", "train"),
             ManifestEntry("b.png", None, "val")),
            protocol="things_only", k=3)
        save_manifest(manifest, tmp_path / "manifest.tsv")
        loaded = load_manifest(tmp_path / "manifest.tsv")
        assert loaded == manifest
        assert loaded.root == tmp_path

    def test_two_entry_manifest_loads(self, tmp_path):
        _touch(tmp_path, "x.png", "y.png", "y_m.png")
        text = "#protocol\tno_fg_bg\n#k\t5\nx.png\t-\ttrain\ny.png\ty_m.png\tval\n"
        (tmp_path / "m.tsv").write_text(text, encoding="utf-8")
        manifest = load_manifest(tmp_path / "m.tsv")
        assert len(manifest) == 2
        assert manifest.k == 5
        assert manifest.entries[0].mask_path is None
        assert manifest.split_entries("val") == (manifest.entries[1],)

    def test_missing_mask_is_named(self, tmp_path):
        _touch(tmp_path, "x.png")
        (tmp_path / "m.tsv").write_text(
            "#protocol\tthings_only\n#k\t1\nx.png\tgone.png\ttrain\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="gone.png"):
            load_manifest(tmp_path / "m.tsv")

    def test_duplicate_image_id_rejected(self, tmp_path):
        _touch(tmp_path, "x.png")
        (tmp_path / "m.tsv").write_text(
            "#protocol\tthings_only\n#k\t1\nx.png\t-\ttrain\nx.png\t-\tval\n",
            encoding="utf-8")
        with pytest.raises(DatasetError, match="duplicate"):
            load_manifest(tmp_path / "m.tsv")

    def test_bad_split_tag_rejected(self, tmp_path):
        _touch(tmp_path, "x.png")
        (tmp_path / "m.tsv").write_text(
            "#protocol\tthings_only\n#k\t1\nx.png\t-\ttest\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="split"):
            load_manifest(tmp_path / "m.tsv")

    def test_header_validation(self, tmp_path):
        _touch(tmp_path, "x.png")
        cases = {
            "missing required header": "#k\t1\nx.png\t-\ttrain\n",
            "unknown header": "#protocol\tthings_only\n#k\t1\n#zap\t1\nx.png\t-\ttrain\n",
            "duplicate header": "#protocol\tthings_only\n#protocol\tthings_only\n#k\t1\n",
            "must be an integer": "#protocol\tthings_only\n#k\tmany\nx.png\t-\ttrain\n",
            "missing remap": ("#protocol\tthings_only\n#k\t1\n#remap\tnone.tsv\n"
                              "x.png\t-\ttrain\n"),
        }
        for pattern, text in cases.items():
            (tmp_path / "m.tsv").write_text(text, encoding="utf-8")
            with pytest.raises(DatasetError, match=pattern):
                load_manifest(tmp_path / "m.tsv")

    def test_missing_manifest_file(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_manifest(tmp_path / "nope.tsv")

    def test_manifest_type_validation(self):
        with pytest.raises(ValueError, match="protocol"):
            DatasetManifest((), "stuffish", 1)
        with pytest.raises(ValueError, match="k must"):
            DatasetManifest((), "things_only", 0)
        with pytest.raises(ValueError, match="split"):
            ManifestEntry("x.png", None, "holdout")


class TestRasters:
    def test_mask_round_trip_with_ignore(self, tmp_path):
        grid = np.arange(64, dtype=np.uint8).reshape(8, 8)
        grid[0, :4] = 255
        write_mask(grid, tmp_path / "m.png")
        assert np.array_equal(read_mask(tmp_path / "m.png"), grid)

    def test_mask_overflow_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="8 bits"):
            write_mask(np.asarray([[300]]), tmp_path / "m.png")
        with pytest.raises(ValueError, match="8 bits"):
            write_mask(np.asarray([[-1]]), tmp_path / "m.png")
        with pytest.raises(ValueError, match="integers"):
            write_mask(np.asarray([[0.5]]), tmp_path / "m.png")

    def test_mask_wrong_channel_count_rejected(self, tmp_path):
        write_image(np.zeros((4, 4, 3)), tmp_path / "rgb.png")
        with pytest.raises(DatasetError, match="single-channel"):
            read_mask(tmp_path / "rgb.png")

    def test_corrupt_mask_rejected(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not a png")
        with pytest.raises(DatasetError, match="decode"):
            read_mask(tmp_path / "bad.png")
        with pytest.raises(DatasetError, match="not found"):
            read_mask(tmp_path / "gone.png")

    def test_image_round_trip_is_exact_after_quantization(self, tmp_path, rng):
        image = rng.random((6, 5, 3))
        write_image(image, tmp_path / "i.png")
        back = read_image(tmp_path / "i.png")
        assert np.array_equal(back, np.round(image * 255.0) / 255.0)

    def test_image_range_checked(self, tmp_path):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            write_image(np.full((2, 2, 3), 1.5), tmp_path / "i.png")
        with pytest.raises(ValueError, match=r"\(H, W, 3\)"):
            write_image(np.zeros((2, 2)), tmp_path / "i.png")


class TestFootprints:
    @given(st.floats(3.0, 20.0), st.floats(25.0, 39.0), st.floats(25.0, 39.0))
    @settings(max_examples=60, deadline=None)
    def test_disk_count_tracks_analytic_area(self, radius, cy, cx):
        count = int(shape_footprint("disk", (64, 64), (cy, cx), radius).sum())
        ring = 2.0 * math.pi * radius
        assert abs(count - disk_area(radius)) <= ring

    def test_square_count_is_exact(self):
        # rows kept are the integers in [cy - h, cy + h]; same for columns.
        cy, cx, h = 20.3, 17.8, 6.2
        per_axis = lambda c: math.floor(c + h) - math.ceil(c - h) + 1
        count = int(shape_footprint("square", (64, 64), (cy, cx), h).sum())
        assert count == per_axis(cy) * per_axis(cx)

    def test_triangle_count_tracks_half_base_times_height(self):
        s = 9.0
        count = int(shape_footprint("triangle", (64, 64), (30.5, 30.5), s).sum())
        area = 2.0 * s * s  # base 2s, height 2s
        perimeter = 2.0 * s + 2.0 * math.hypot(2.0 * s, s)
        assert abs(count - area) <= perimeter

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError, match="kind"):
            shape_footprint("hexagon", (8, 8), (4, 4), 2.0)
        with pytest.raises(ValueError, match="positive"):
            shape_footprint("disk", (8, 8), (4, 4), 0.0)


def _tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestGenerateSynthetic:
    def test_same_seed_writes_identical_bytes(self, tmp_path):
        cfg = SynthConfig(count=8, seed=1)
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    def test_every_class_reaches_both_splits(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=60, seed=0), tmp_path)
        seen = {split: set() for split in ("train", "val")}
        for entry in manifest.entries:
            mask = read_mask(manifest.resolve(entry.mask_path))
            seen[entry.split].update(int(c) for c in np.unique(mask) if c > 0)
        assert seen["train"] == {1, 2, 3}
        assert seen["val"] == {1, 2, 3}

    def test_manifest_is_loadable_and_complete(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=12, seed=5), tmp_path)
        reloaded = load_manifest(tmp_path / "manifest.tsv")
        assert reloaded == manifest
        assert reloaded.protocol == "things_only"
        assert reloaded.k == 3
        assert len(reloaded.split_entries("val")) == 3

    def test_shapes_and_masks_are_pixel_aligned(self, tmp_path):
        cfg = SynthConfig(count=6, seed=2, noise=0.0)
        manifest = generate_synthetic(cfg, tmp_path)
        palette_u8 = np.round(np.asarray(cfg.palette) * 255.0).astype(np.uint8)
        for entry in manifest.entries:
            image = np.round(read_image(manifest.resolve(entry.image_path)) * 255.0)
            mask = read_mask(manifest.resolve(entry.mask_path))
            assert mask.max() <= cfg.k_gt
            for cls in np.unique(mask):
                if cls == 0:
                    continue
                pixels = image[mask == cls].astype(np.uint8)
                assert np.array_equal(
                    pixels, np.broadcast_to(palette_u8[cls - 1], pixels.shape))

    def test_noise_free_disk_matches_area_formula(self, tmp_path):
        cfg = SynthConfig(count=10, seed=3, noise=0.0, k_gt=1, kinds=("disk",),
                          min_shapes=1, max_shapes=1)
        manifest = generate_synthetic(cfg, tmp_path)
        r_lo = MIN_SHAPE_FRAC * cfg.side
        r_hi = MAX_SHAPE_FRAC * cfg.side
        ring = 2.0 * math.pi * r_hi
        for entry in manifest.entries:
            count = int((read_mask(manifest.resolve(entry.mask_path)) == 1).sum())
            assert disk_area(r_lo) - ring <= count <= disk_area(r_hi) + ring

    def test_config_validation(self):
        with pytest.raises(ValueError, match="k_gt"):
            SynthConfig(k_gt=4)
        with pytest.raises(ValueError, match="palette"):
            SynthConfig(k_gt=2, palette=((1.0, 0.0, 0.0),))
        with pytest.raises(ValueError, match="kind"):
            SynthConfig(kinds=("disk", "pentagon", "square"), k_gt=1)
        with pytest.raises(ValueError, match="noise"):
            SynthConfig(noise=-0.1)
        with pytest.raises(ValueError, match="min_shapes"):
            SynthConfig(min_shapes=0)
        with pytest.raises(ValueError, match="count"):
            SynthConfig(count=0)
