import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation
from statistics import NormalDist

from vqcpc.sax import (
    FewerTuplesThanClusters,
    NonDivisibleLength,
    SaxConfig,
    SaxRepeat,
    assign,
    breakpoints,
    channel_sax,
    lloyd_kmeans,
    paa,
    sax_discretize,
    sax_repeat_discretize,
    symbolize,
)
from vqcpc.datapipe import SensorWindow


def test_paa_examples():
    np.testing.assert_array_equal(paa([1, 2, 3, 4], 2), [1.5, 3.5])
    np.testing.assert_array_equal(paa([5, 5, 5, 5], 2), [5, 5])
    np.testing.assert_array_equal(paa([1, 2, 3, 4, 5, 6], 3), [1.5, 3.5, 5.5])
    with pytest.raises(NonDivisibleLength):
        paa([1, 2, 3], 2)


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, st.integers(1, 12).map(lambda n: n * 6), elements=st.floats(-1e3, 1e3)), seg=st.sampled_from([1, 2, 3, 6]))
def test_paa_mean_preserving(x, seg):
    assert abs(paa(x, seg).mean() - x.mean()) <= 1e-12 * max(1.0, np.abs(x).max())


def test_breakpoints_four():
    np.testing.assert_allclose(breakpoints(4), [-0.6744897501960817, 0.0, 0.6744897501960817], atol=1e-12)


@pytest.mark.parametrize("a", [3, 8, 512])
def test_breakpoints_vs_independent_inverse_cdf(a):
    oracle = [NormalDist().inv_cdf(j / a) for j in range(1, a)]
    bps = breakpoints(a)
    np.testing.assert_allclose(bps, oracle, atol=1e-9)
    assert np.all(np.diff(bps) > 0) and len(bps) == a - 1


def test_bin_lookup():
    np.testing.assert_array_equal(symbolize(np.array([-1, -0.1, 0.1, 1]), breakpoints(4)), [0, 1, 2, 3])
    # a value equal to a breakpoint falls in the lower bin
    assert symbolize(np.array([0.0]), breakpoints(4))[0] == 1


@pytest.mark.parametrize("a", [2, 4, 7, 16])
def test_equiprobable_bins(a):
    x = np.random.default_rng(a).standard_normal(1_000_000)
    freq = np.bincount(symbolize(x, breakpoints(a)), minlength=a) / len(x)
    np.testing.assert_allclose(freq, 1 / a, atol=0.01)


def test_sax_length_and_alphabet():
    w = SensorWindow(np.random.default_rng(0).normal(size=(100, 3)), 1, "p")
    seq = sax_discretize(w, SaxConfig(512, 2))
    assert len(seq.ids) == 50
    assert all(0 <= s < 512 for s in seq.ids)
    assert seq.label == 1 and seq.participant_id == "p"


def test_sax_constant_magnitude_middle_symbol():
    v = np.zeros((100, 3))
    v[:, 2] = 1.0
    assert sax_discretize(v, SaxConfig(8, 2)).ids == [4] * 50


def test_sax_rotation_invariance():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(100, 3))
    cfg = SaxConfig(512, 2)
    base = sax_discretize(v, cfg).ids
    # signed axis permutations keep magnitude bit-exact
    for perm in ([1, 2, 0], [2, 0, 1], [0, 2, 1]):
        for signs in ([1, -1, 1], [-1, -1, -1]):
            assert sax_discretize(v[:, perm] * signs, cfg).ids == base
    for seed in range(5):
        R = Rotation.random(random_state=seed).as_matrix()
        assert sax_discretize(v @ R.T, cfg).ids == base


class TestKMeans:
    def test_assign_matches_brute_force(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 8, size=(300, 3)).astype(float)
        res = lloyd_kmeans(x, 12, seed=0)
        for i, row in enumerate(x):
            d = [float(np.sum((row - c) ** 2)) for c in res.centroids]
            assert res.labels[i] == d.index(min(d))

    def test_ties_lowest_index(self):
        c = np.array([[0.0], [2.0], [0.0]])
        assert assign(np.array([[1.0], [0.0]]), c).tolist() == [0, 0]

    def test_separated_clusters_found(self):
        rng = np.random.default_rng(0)
        centers = np.array([[0, 0], [10, 0], [0, 10]], dtype=float)
        x = np.concatenate([c + 0.1 * rng.normal(size=(50, 2)) for c in centers])
        res = lloyd_kmeans(x, 3, seed=1)
        found = sorted(map(tuple, np.round(res.centroids)))
        assert found == sorted(map(tuple, centers))

    def test_deterministic(self):
        x = np.random.default_rng(0).normal(size=(200, 3))
        a, b = lloyd_kmeans(x, 5, seed=3), lloyd_kmeans(x, 5, seed=3)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_no_empty_clusters(self):
        x = np.array([[0.0]] * 50 + [[1.0]] * 50 + [[2.0]])
        res = lloyd_kmeans(x, 3, seed=0)
        assert len(np.unique(res.labels)) == 3


class TestSaxRepeat:
    def windows(self, n=30, seed=0):
        rng = np.random.default_rng(seed)
        return [SensorWindow(rng.normal(size=(100, 3)), i % 2, f"p{i % 3}") for i in range(n)]

    def test_k_capped_at_distinct_tuples(self):
        ws = self.windows()
        cfg = SaxConfig(4, 2)
        with pytest.warns(FewerTuplesThanClusters):
            model = SaxRepeat(cfg, k=512).fit(ws)
        distinct = len(np.unique(np.concatenate([channel_sax(w, cfg) for w in ws]), axis=0))
        assert distinct <= 64
        assert model.k_effective == distinct

    def test_tokens_are_nearest_centroids(self):
        ws = self.windows()
        cfg = SaxConfig(16, 2)
        model = SaxRepeat(cfg, k=20, seed=0).fit(ws)
        seqs = model.transform(ws)
        for w, seq in zip(ws, seqs):
            tuples = channel_sax(w, cfg)
            for t, tok in zip(tuples, seq.ids):
                d = [float(np.sum((t - c) ** 2)) for c in model.centroids]
                assert tok == d.index(min(d))
            assert len(seq.ids) == 50

    def test_identical_symbols_identical_tokens(self):
        ws = self.windows(10)
        twin = SensorWindow(ws[0].values * 3.0 + 1.0, 0, "x")  # per-channel z-norm removes scale/offset
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FewerTuplesThanClusters)
            seqs = sax_repeat_discretize(ws, ws + [twin], SaxConfig(8, 2), k=16)
        assert seqs[0].ids == seqs[-1].ids

    def test_transform_before_fit(self):
        with pytest.raises(RuntimeError):
            SaxRepeat().transform(self.windows(1))
