import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exhaustive_kmeans
from topdownseg.archive import ArchiveError
from topdownseg.concepts import (
    ConceptBank,
    discover,
    kmeans,
    load_bank,
    save_bank,
)


class TestKmeans:
    def test_two_well_separated_pairs(self):
        pts = np.asarray([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
        centers, assignments, inertia = kmeans(pts, 2, seed=0)
        got = {tuple(c) for c in np.round(centers, 9)}
        assert got == {(0.0, 0.5), (10.0, 10.5)}
        assert inertia == pytest.approx(1.0, abs=1e-9)
        assert assignments[0] == assignments[1]
        assert assignments[2] == assignments[3]
        assert assignments[0] != assignments[2]

    def test_deterministic_for_seed(self, rng):
        pts = rng.standard_normal((20, 3))
        a = kmeans(pts, 4, seed=11)
        b = kmeans(pts, 4, seed=11)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])
        assert a[2] == b[2]

    def test_matches_exhaustive_optimum(self):
        # Small instances solved exactly by enumerating every assignment.
        master = np.random.default_rng(42)
        for trial in range(50):
            n = int(master.integers(4, 9))
            pts = master.standard_normal((n, 2)) * master.uniform(0.5, 3.0)
            best_inertia, _ = exhaustive_kmeans(pts, 2)
            _, _, inertia = kmeans(pts, 2, seed=trial)
            assert inertia == pytest.approx(best_inertia, rel=1e-9), f"trial {trial}"

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_points_assigned_to_nearest_center(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.standard_normal((12, 2))
        centers, assignments, _ = kmeans(pts, 3, seed=1)
        d2 = ((pts[:, None, :] - centers[None]) ** 2).sum(axis=2)
        for i in range(len(pts)):
            best = d2[i].min()
            assert d2[i, assignments[i]] == pytest.approx(best, rel=1e-12)
            # ties break toward the lowest center index
            first_argmin = int(np.argmin(d2[i]))
            if d2[i, first_argmin] == d2[i, assignments[i]]:
                assert assignments[i] == first_argmin

    def test_no_cluster_left_empty_with_duplicates(self):
        pts = np.asarray([[0.0], [0.0], [0.0], [0.0], [5.0]])
        _, assignments, _ = kmeans(pts, 2, seed=0)
        assert set(assignments.tolist()) == {0, 1}

    def test_all_identical_points(self):
        pts = np.zeros((4, 2))
        centers, assignments, inertia = kmeans(pts, 2, seed=0)
        assert inertia == 0.0
        assert set(assignments.tolist()) == {0, 1}

    def test_validation(self):
        pts = np.zeros((3, 2))
        with pytest.raises(ValueError):
            kmeans(pts, 0, seed=0)
        with pytest.raises(ValueError):
            kmeans(pts, 4, seed=0)
        bad = pts.copy()
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            kmeans(bad, 2, seed=0)


class TestDiscover:
    def _features(self, rng, n, d=6, offset=0.0):
        return rng.standard_normal((n, d)) + offset

    def test_concatenates_fg_then_bg(self, rng):
        fg = self._features(rng, 12, offset=0.0)
        bg = self._features(rng, 8, offset=50.0)
        bank = discover(fg, bg, k_fg=3, k_bg=2, seed=5)
        assert bank.k == 5
        assert bank.roles == ["fg", "fg", "fg", "bg", "bg"]
        assert bank.vectors.dtype == np.float32
        assert bank.kmeans_seed == 5
        # fg centers live near the fg cloud, bg near the bg cloud
        assert np.abs(bank.vectors[:3]).max() < 10
        assert bank.vectors[3:].min() > 40

    def test_proportional_split_default(self, rng):
        fg = self._features(rng, 30)
        bg = self._features(rng, 10)
        bank = discover(fg, bg, k=4, seed=0)
        assert bank.roles == ["fg", "fg", "fg", "bg"]

    def test_proportional_split_keeps_minority_group(self, rng):
        fg = self._features(rng, 99)
        bg = self._features(rng, 1)
        bank = discover(fg, bg, k=4, seed=0)
        assert bank.roles.count("bg") == 1

    def test_single_group_any_role(self, rng):
        feats = self._features(rng, 20)
        bank = discover(feats, [], k_fg=4, k_bg=0, seed=1, fg_role="any")
        assert bank.roles == ["any"] * 4

    def test_empty_group_with_positive_k_names_group(self, rng):
        fg = self._features(rng, 10)
        with pytest.raises(ValueError, match="'bg'"):
            discover(fg, [], k_fg=2, k_bg=2, seed=0)

    def test_too_few_crops_names_group(self, rng):
        fg = self._features(rng, 2)
        bg = self._features(rng, 10)
        with pytest.raises(ValueError, match="'fg'"):
            discover(fg, bg, k_fg=3, k_bg=1, seed=0)

    def test_split_conflict_rejected(self, rng):
        fg = self._features(rng, 10)
        bg = self._features(rng, 10)
        with pytest.raises(ValueError):
            discover(fg, bg, k_fg=2, k_bg=2, k=3, seed=0)

    def test_deterministic(self, rng):
        fg = self._features(rng, 15)
        bg = self._features(rng, 9)
        a = discover(fg, bg, k_fg=2, k_bg=2, seed=3)
        b = discover(fg, bg, k_fg=2, k_bg=2, seed=3)
        assert np.array_equal(a.vectors, b.vectors)


class TestBankSerialization:
    def test_round_trip(self, tmp_path, rng):
        bank = ConceptBank(
            vectors=rng.standard_normal((4, 6)).astype(np.float32),
            roles=["fg", "fg", "bg", "any"],
            kmeans_seed=123456789012345,
        )
        path = tmp_path / "bank.tfgu"
        save_bank(bank, path)
        loaded = load_bank(path)
        assert np.array_equal(loaded.vectors, bank.vectors)
        assert loaded.roles == bank.roles
        assert loaded.kmeans_seed == bank.kmeans_seed

    def test_missing_tensor_rejected(self, tmp_path):
        from topdownseg.archive import save_archive

        path = tmp_path / "broken.tfgu"
        save_archive(path, {"concepts.vectors": np.zeros((2, 3), dtype=np.float32)})
        with pytest.raises(ArchiveError):
            load_bank(path)

    def test_bad_role_rejected(self):
        with pytest.raises(ValueError):
            ConceptBank(np.zeros((1, 2), dtype=np.float32), ["sky"], 0)
