import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fingersynth.biometric import (
    CnnSpoofScorer,
    FarAnalysis,
    MatchScoreTable,
    NccMatcher,
    PairSet,
    calibrate_far_threshold,
    compute_synthetic_far,
    cumulative_distribution,
    default_match_score,
    far_analysis,
    histogram_overlap,
    make_pairs,
    score_pairs,
    spoof_score_histogram,
    write_score_table,
)
from fingersynth.data import apply_spoof_corruption, synth_ridge_dataset
from fingersynth.errors import ConfigurationError


class TestDefaultMatcher:
    def test_identical_images(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(-1, 1, size=(32, 32))
        assert default_match_score(img, img.copy()) == pytest.approx(1.0, abs=1e-6)

    def test_negation_maps_to_floor(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(-1, 1, size=(32, 32))
        assert default_match_score(img, -img) < 0.2

    def test_shift_inside_search_window(self):
        # oracle: cyclic shift by 4 px is inside the +/-8 px search
        rng = np.random.default_rng(2)
        img = rng.uniform(-1, 1, size=(32, 32))
        shifted = np.roll(img, (4, 3), axis=(0, 1))
        assert default_match_score(img, shifted) == pytest.approx(1.0, abs=1e-3)

    def test_exactly_symmetric(self):
        ds = synth_ridge_dataset(2, 32, seed=4, n_fingers=2)
        a, b = ds.images[0, 0], ds.images[1, 0]
        assert abs(default_match_score(a, b) - default_match_score(b, a)) < 1e-9

    def test_rotation_inside_search_window(self):
        from scipy.ndimage import rotate as nd_rotate

        ds = synth_ridge_dataset(1, 32, seed=5)
        img = ds.images[0, 0]
        rot = nd_rotate(img, 10.0, reshape=False, order=1, mode="nearest")
        assert default_match_score(img, rot) > 0.85

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError):
            default_match_score(np.zeros((32, 32)), np.zeros((16, 16)))

    def test_batched_equals_single(self):
        ds = synth_ridge_dataset(6, 32, seed=7, n_fingers=3)
        matcher = NccMatcher()
        idx = matcher.index(ds.images)
        pairs = PairSet(np.array([0, 2, 4]), np.array([1, 3, 5]), "impostor", 0)
        batch = matcher.score_indexed(idx, pairs.idx_a, idx, pairs.idx_b)
        singles = [matcher.score(ds.images[i, 0], ds.images[j, 0]) for i, j in zip(pairs.idx_a, pairs.idx_b)]
        assert np.allclose(batch, singles, atol=1e-9)


class TestMakePairs:
    def _labeled(self):
        return synth_ridge_dataset(24, 16, seed=0, n_fingers=4)

    def test_exact_count_no_self_pairs(self):
        ds = self._labeled()
        ps = make_pairs(ds, "impostor", 1000, seed=1)
        assert len(ps) == 1000
        assert np.all(ps.idx_a != ps.idx_b)

    def test_impostor_crosses_fingers(self):
        ds = synth_ridge_dataset(12, 16, seed=0, n_fingers=2)
        ps = make_pairs(ds, "impostor", 200, seed=2)
        ids = np.array(ds.identities)
        assert np.all(ids[ps.idx_a] != ids[ps.idx_b])

    def test_genuine_shares_finger(self):
        ds = self._labeled()
        ps = make_pairs(ds, "genuine", 200, seed=3)
        ids = np.array(ds.identities)
        assert np.all(ids[ps.idx_a] == ids[ps.idx_b])
        assert np.all(ps.idx_a != ps.idx_b)

    def test_seed_reproducibility(self):
        ds = self._labeled()
        p1 = make_pairs(ds, "genuine", 50, seed=9)
        p2 = make_pairs(ds, "genuine", 50, seed=9)
        assert np.array_equal(p1.idx_a, p2.idx_a) and np.array_equal(p1.idx_b, p2.idx_b)
        p3 = make_pairs(ds, "genuine", 50, seed=10)
        assert not np.array_equal(p1.idx_a, p3.idx_a)

    def test_unlabeled_genuine_rejected(self):
        ds = self._labeled()
        ds.identities = [None] * len(ds)
        with pytest.raises(ValueError):
            make_pairs(ds, "genuine", 10, seed=0)

    def test_assumed_impostor_cross_dataset(self):
        a = self._labeled()
        b = synth_ridge_dataset(10, 16, seed=5, n_fingers=10)
        ps = make_pairs(a, "assumed_impostor", 300, seed=1, dataset_b=b)
        assert ps.cross_dataset
        assert ps.idx_a.max() < len(a) and ps.idx_b.max() < len(b)

    def test_assumed_impostor_within_set(self):
        b = synth_ridge_dataset(10, 16, seed=5, n_fingers=10)
        ps = make_pairs(b, "assumed_impostor", 300, seed=1)
        assert not ps.cross_dataset
        assert np.all(ps.idx_a != ps.idx_b)

    def test_unknown_type_rejected(self):
        with pytest.raises(ValueError):
            make_pairs(self._labeled(), "twin", 10, seed=0)


class TestFarCalibration:
    def test_counting_oracle(self):
        scores = np.arange(1, 101, dtype=float)
        cal = calibrate_far_threshold(scores, 0.05)
        assert cal.k == 5
        assert cal.threshold == 96.0
        assert cal.realized_far == pytest.approx(0.05)
        assert not cal.tie_flag

    def test_k_zero_branch(self):
        scores = np.arange(1, 101, dtype=float)
        cal = calibrate_far_threshold(scores, 0.005)  # floor(100 * 0.005) = 0
        assert cal.k == 0
        assert cal.threshold == float("inf")
        assert cal.realized_far == 0.0

    def test_tie_branch(self):
        scores = np.full(100, 0.7)
        cal = calibrate_far_threshold(scores, 0.01)
        assert cal.threshold == 0.7
        assert cal.realized_far == 1.0
        assert cal.tie_flag

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            calibrate_far_threshold([], 0.1)
        with pytest.raises(ValueError):
            calibrate_far_threshold([1.0], 1.5)

    @settings(max_examples=50, deadline=None)
    @given(
        scores=st.lists(st.floats(min_value=0, max_value=1, allow_nan=False), min_size=5, max_size=200),
        f1=st.floats(min_value=0.01, max_value=0.49),
        f2=st.floats(min_value=0.5, max_value=0.99),
    )
    def test_threshold_monotonicity(self, scores, f1, f2):
        # decreasing the target FAR never decreases the threshold
        lo = calibrate_far_threshold(scores, f1)
        hi = calibrate_far_threshold(scores, f2)
        assert lo.threshold >= hi.threshold


class TestSyntheticFar:
    def test_extremes(self):
        assert compute_synthetic_far(np.array([0.1, 0.2]), 0.5) == 0.0
        assert compute_synthetic_far(np.array([0.6, 0.7]), 0.5) == 1.0
        assert compute_synthetic_far(np.array([0.6, 0.7]), float("inf")) == 0.0

    def test_hand_count(self):
        scores = np.array([0.1, 0.5, 0.5, 0.7, 0.9, 0.3])
        assert compute_synthetic_far(scores, 0.5) == pytest.approx(4 / 6)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(min_value=0, max_value=1, allow_nan=False), min_size=1, max_size=100))
    def test_monotone_in_threshold(self, scores):
        fars = [compute_synthetic_far(scores, x) for x in (0.1, 0.4, 0.8)]
        assert fars[0] >= fars[1] >= fars[2]

    def test_accepts_score_table(self):
        table = MatchScoreTable(np.array([0.2, 0.8]), PairSet(np.array([0]), np.array([1]), "impostor", 0), "m")
        assert compute_synthetic_far(table, 0.5) == 0.5


class TestFarAnalysisReport:
    def test_populations_and_text(self):
        rng = np.random.default_rng(0)
        imp = rng.uniform(0, 0.6, size=1000)
        analysis = far_analysis(imp, {"synthetic_synthetic": rng.uniform(0, 1, 500)}, baseline_far=0.01)
        assert 0 < analysis.threshold < 0.6
        text = analysis.to_text()
        assert "real_impostor" in text and "synthetic_synthetic" in text
        assert str(int(analysis.tie_flag)) in text

    def test_cumulative_distribution(self):
        cd = cumulative_distribution([0.3, 0.1, 0.2])
        assert cd.shape == (3, 2)
        assert np.allclose(cd[:, 0], [0.1, 0.2, 0.3])
        assert np.allclose(cd[:, 1], [1 / 3, 2 / 3, 1.0])


class TestScoreTableIo:
    def test_written_columns(self, tmp_path):
        ds = synth_ridge_dataset(6, 16, seed=0, n_fingers=3)
        ps = make_pairs(ds, "impostor", 10, seed=1)
        table = score_pairs(ps, ds.images)
        p = tmp_path / "scores.tsv"
        write_score_table(p, table, ids_a=ds.identities, ids_b=ds.identities)
        lines = p.read_text().splitlines()
        assert len(lines) == 11
        cols = lines[1].split("\t")
        assert len(cols) == 5 and cols[3] == "impostor"


class TestSpoofHistogram:
    def test_single_bin(self):
        hist = spoof_score_histogram(lambda imgs: np.full(len(imgs), 0.5), np.zeros((10, 1, 8, 8)), bins=10)
        assert (hist.counts > 0).sum() == 1
        assert hist.counts.sum() == 10

    def test_counts_conserved(self):
        rng = np.random.default_rng(0)
        hist = spoof_score_histogram(lambda imgs: rng.uniform(0, 1, len(imgs)), np.zeros((57, 1, 8, 8)))
        assert hist.counts.sum() == 57
        assert hist.n == 57

    def test_overlap_identical_and_disjoint(self):
        # oracle: direct bin-minimum summation
        low = spoof_score_histogram(lambda imgs: np.full(len(imgs), 0.2), np.zeros((10, 1, 4, 4)), bins=10)
        high = spoof_score_histogram(lambda imgs: np.full(len(imgs), 0.8), np.zeros((10, 1, 4, 4)), bins=10)
        assert histogram_overlap(low, low) == pytest.approx(1.0)
        assert histogram_overlap(low, high) == pytest.approx(0.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            spoof_score_histogram(lambda imgs: np.zeros(0), np.zeros((0, 1, 4, 4)))

    def test_out_of_range_scores_rejected(self):
        with pytest.raises(ValueError):
            spoof_score_histogram(lambda imgs: np.full(len(imgs), 1.5), np.zeros((3, 1, 4, 4)))

    def test_rows_export(self):
        hist = spoof_score_histogram(lambda imgs: np.full(len(imgs), 0.5), np.zeros((10, 1, 8, 8)), bins=4)
        rows = hist.to_rows().splitlines()
        assert len(rows) == 5
        assert rows[3].split("\t")[2] == "10"


class TestCnnSpoofScorer:
    def test_learns_live_vs_spoof(self):
        live = synth_ridge_dataset(48, 32, seed=1, n_fingers=12).images
        spoof = apply_spoof_corruption(live, seed=2)
        scorer = CnnSpoofScorer(width=8).fit(live, spoof, seed=0)
        live_scores = scorer(live)
        spoof_scores = scorer(spoof)
        assert live_scores.min() >= 0 and spoof_scores.max() <= 1
        assert spoof_scores.mean() > live_scores.mean() + 0.2

    def test_requires_fit(self):
        with pytest.raises(ConfigurationError):
            CnnSpoofScorer()(np.zeros((2, 1, 8, 8)))
