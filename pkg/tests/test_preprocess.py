import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tbm import preprocess as pp
from tbm.errors import (
    AllMissing,
    MissingGeology,
    NonPositiveValue,
    TooFewSamples,
    WindowTooLarge,
    ZeroRange,
    ZeroVariance,
)
from tbm.records import ExcavationRecord, FusedSample, GeologyRecord, Phase
from tbm.word2vec import TextEmbedding

NAN = float("nan")
finite_series = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=60)


def geo(ring, ucs=10.0):
    return GeologyRecord(ring, "Soft plastic", "Loose", ucs, 0.01, 5, 3, 0.0087, 0.36, 0.51, 9.8)


def exc(t, ring, speed=1.0, phase=Phase.STABLE):
    return ExcavationRecord(t, ring, speed, 1.5, 2000.0, 40000.0, 300.0, 680.0, 65.0, 9000.0, phase)


def tiny_embedding():
    return TextEmbedding({"soft": 0, "plastic": 1, "loose": 2}, np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]))


def naive_rolling(x, window):
    half = window // 2
    med, mad = [], []
    for i in range(len(x)):
        w = np.array(x[max(0, i - half) : i + half + 1])
        m = float(np.median(w))
        med.append(m)
        mad.append(float(np.median(np.abs(w - m))))
    return np.array(med), np.array(mad)


# -- fill_missing ------------------------------------------------------------

def test_fill_midpoint():
    np.testing.assert_array_equal(pp.fill_missing([1, NAN, 3]), [1, 2, 3])


def test_fill_edges():
    np.testing.assert_array_equal(pp.fill_missing([NAN, 5, NAN]), [5, 5, 5])


def test_fill_identity_and_all_missing():
    np.testing.assert_array_equal(pp.fill_missing([1.0, 4.0]), [1.0, 4.0])
    with pytest.raises(AllMissing):
        pp.fill_missing([NAN, NAN])


@settings(max_examples=50, deadline=None)
@given(finite_series, st.data())
def test_fill_idempotent(values, data):
    x = np.array(values)
    holes = data.draw(st.lists(st.integers(0, len(x) - 2), max_size=len(x) - 1))
    x[holes] = NAN
    once = pp.fill_missing(x)
    np.testing.assert_array_equal(pp.fill_missing(once), once)


# -- discrete points -----------------------------------------------------------

def test_spike_replaced_by_constant():
    x = np.full(20, 4.0)
    x[9] = 1000.0
    np.testing.assert_array_equal(pp.remove_discrete_points(x, window=5, k=3), np.full(20, 4.0))


def test_ramp_unchanged_and_oracle_agrees():
    x = np.arange(30, dtype=float)
    med, mad = naive_rolling(x, 11)
    assert np.all(np.abs(x - med) <= 3 * np.maximum(mad, 1e-9))
    np.testing.assert_array_equal(pp.remove_discrete_points(x, window=11, k=3), x)


def test_rolling_matches_naive_oracle():
    x = np.random.default_rng(0).normal(size=40)
    med, mad = pp.rolling_median_mad(x, 7)
    ref_med, ref_mad = naive_rolling(x, 7)
    np.testing.assert_allclose(med, ref_med, atol=1e-15)
    np.testing.assert_allclose(mad, ref_mad, atol=1e-15)


def test_despike_window_too_large():
    with pytest.raises(WindowTooLarge):
        pp.remove_discrete_points([1.0, 2.0, 3.0], window=5, k=3)


def test_step_edge_survives_despike():
    x = np.r_[np.zeros(20), np.full(20, 50.0)]
    np.testing.assert_array_equal(pp.remove_discrete_points(x, 11, 5), x)


# -- normalisation -------------------------------------------------------------

def test_zscore_example():
    out, mean, std = pp.zscore_normalize([1, 2, 3])
    np.testing.assert_allclose(out, [-1, 0, 1], atol=1e-15)
    assert (mean, std) == (2.0, 1.0)


def test_zscore_constant():
    with pytest.raises(ZeroVariance):
        pp.zscore_normalize([5, 5, 5])


@settings(max_examples=100, deadline=None)
@given(finite_series)
def test_zscore_properties(values):
    x = np.array(values)
    if np.ptp(x) < 1e-6:
        return
    out, mean, std = pp.zscore_normalize(x)
    assert abs(out.mean()) < 1e-12
    assert abs(out.std(ddof=1) - 1) < 1e-12
    np.testing.assert_allclose(out * std + mean, x, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))


def test_minmax_examples():
    np.testing.assert_allclose(pp.minmax_normalize([2, 4, 6])[0], [0, 0.5, 1])
    np.testing.assert_allclose(pp.minmax_normalize([1, 3])[0], [0, 1])
    with pytest.raises(ZeroRange):
        pp.minmax_normalize([7, 7])


@settings(max_examples=100, deadline=None)
@given(finite_series)
def test_minmax_properties(values):
    x = np.array(values)
    if np.ptp(x) < 1e-6:
        return
    out, lo, hi = pp.minmax_normalize(x)
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_allclose(out * (hi - lo) + lo, x, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))


# -- box-cox -------------------------------------------------------------------

def test_boxcox_forced_lambdas():
    assert pp.boxcox([5.0], lam=1.0)[0][0] == 4.0
    assert pp.boxcox([math.e], lam=0.0)[0][0] == pytest.approx(1.0, abs=1e-15)


def test_boxcox_lambda_one_is_shift():
    x = np.random.default_rng(2).uniform(0.1, 9, 50)
    np.testing.assert_allclose(pp.boxcox(x, lam=1.0)[0], x - 1, atol=1e-15)


def test_boxcox_nonpositive():
    with pytest.raises(NonPositiveValue):
        pp.boxcox([1.0, 0.0, 2.0])


def test_boxcox_loglik_matches_scipy():
    x = np.random.default_rng(3).lognormal(size=200)
    for lam in (-1.3, -0.5, 0.0, 0.37, 1.0, 2.0):
        assert pp.boxcox_loglik(x, lam) == pytest.approx(stats.boxcox_llf(lam, x), rel=1e-10)


def test_boxcox_lognormal_lambda_near_zero():
    x = np.random.default_rng(12345).lognormal(mean=0.0, sigma=1.0, size=1000)
    _, lam = pp.boxcox(x)
    assert -0.25 <= lam <= 0.25
    # continuous MLE from scipy lies within one grid step
    assert abs(lam - stats.boxcox_normmax(x, method="mle")) <= 0.01


# -- smoothing -----------------------------------------------------------------

def test_window_smooth_examples():
    np.testing.assert_allclose(pp.window_smooth([0, 0, 3, 0, 0], 3), [0, 1, 1, 1, 0], atol=1e-15)
    np.testing.assert_array_equal(pp.window_smooth(np.full(6, 2.5), 5), np.full(6, 2.5))
    x = np.array([3.0, 1.0, 4.0])
    np.testing.assert_array_equal(pp.window_smooth(x, 1), x)
    np.testing.assert_array_equal(pp.window_smooth(pp.window_smooth(x, 1), 1), x)


def test_window_smooth_truncated_edges():
    np.testing.assert_allclose(pp.window_smooth([3.0, 6.0, 9.0, 12.0], 3), [4.5, 6, 9, 10.5])


def test_window_smooth_too_large():
    with pytest.raises(WindowTooLarge):
        pp.window_smooth([1.0, 2.0], 3)


# -- phase filter / split --------------------------------------------------------

def test_filter_operating_segments():
    stable = [exc(i, 1) for i in range(3)]
    assert pp.filter_operating_segments(stable) == stable
    assert pp.filter_operating_segments([exc(i, 1, phase=Phase.RISING) for i in range(3)]) == []
    mixed = [exc(0, 1), exc(1, 1, phase=Phase.RISING), exc(2, 1)]
    assert pp.filter_operating_segments(mixed) == [mixed[0], mixed[2]]
    assert pp.filter_operating_segments(pp.filter_operating_segments(mixed)) == [mixed[0], mixed[2]]


@pytest.mark.parametrize("n, sizes", [(400, (280, 80, 40)), (10, (7, 2, 1)), (103, (73, 20, 10))])
def test_split_sizes(n, sizes):
    train, valid, test = pp.split_dataset(list(range(n)), seed=0)
    assert (len(train), len(valid), len(test)) == sizes
    assert train + valid + test == list(range(n))


def test_split_too_few():
    with pytest.raises(TooFewSamples):
        pp.split_dataset(list(range(9)))


# -- merge -----------------------------------------------------------------------

def test_merge_horizon_consumes_one_row():
    rows = [exc(t, 1, speed=float(t + 1)) for t in range(3)]
    out = pp.merge_geology_excavation([geo(1)], rows, tiny_embedding())
    assert len(out) == 2
    assert [s.target for s in out] == [2.0, 3.0]
    assert out[0].features[0] == 1.0


def test_merge_missing_geology():
    with pytest.raises(MissingGeology):
        pp.merge_geology_excavation([geo(1)], [exc(0, 2)], tiny_embedding())


def test_merge_embeds_categories():
    out = pp.merge_geology_excavation([geo(1)], [exc(0, 1), exc(1, 1)], tiny_embedding())
    f = out[0].features
    # 8 excavation + 8 geology numeric, then plasticity emb, then density emb
    np.testing.assert_array_equal(f[16:18], [0.5, 0.5])
    np.testing.assert_array_equal(f[18:20], [2.0, 2.0])


def naive_join_count(geos, rows):
    count = 0
    rings = {g.ring for g in geos}
    for ring in rings:
        ring_rows = [r for r in rows if r.ring == ring]
        for r in ring_rows:
            if any(o.timestamp > r.timestamp for o in ring_rows):
                count += 1
    return count


def test_merge_400_rings_count():
    geos = [geo(r) for r in range(1, 401)]
    rows = [exc(r * 10 + t, r) for r in range(1, 401) for t in range(5)]
    out = pp.merge_geology_excavation(geos, rows, tiny_embedding())
    assert len(out) == naive_join_count(geos, rows) == len(rows) - 400


# -- pipelines -------------------------------------------------------------------

def test_rate_pipeline_train_stats(small_corpus):
    geos, rows = small_corpus
    samples, manifest = pp.prepare_rate_dataset(geos, rows, emb_dim=3, seed=1)
    feats = np.stack([s.features for s in samples])
    assert not np.isnan(feats).any()
    assert all(s.phase == Phase.STABLE for s in samples)
    n_train, _, _ = pp.split_sizes(len(samples))
    speed = feats[:n_train, 0]
    assert abs(speed.mean()) < 1e-9 and abs(speed.std(ddof=1) - 1) < 1e-9
    assert len(manifest.feature_names) == feats.shape[1] == 8 + 8 + 2 * 3


def test_anomaly_pipeline_range(small_corpus):
    geos, rows = small_corpus
    data = pp.prepare_anomaly_dataset(geos, rows, fit_rows=200, emb_dim=3, seed=1)
    assert data.excavation.min() >= 0 and data.excavation.max() <= 1
    assert data.geology.min() >= 0 and data.geology.max() <= 1
    xw, gw, ts = data.windows(16)
    assert xw.shape[1:] == (16, 8) and gw.shape[0] == xw.shape[0] == len(ts)


def test_rate_csv_roundtrip(tmp_path):
    samples = [FusedSample(np.array([0.1, 1 / 3, -2e-17]), 0.7, 4), FusedSample(np.array([1.0, 2.0, 3.0]), -1.25, 5)]
    pp.write_rate_csv(tmp_path / "f.csv", samples)
    back = pp.read_rate_csv(tmp_path / "f.csv")
    for a, b in zip(samples, back):
        assert a.ring == b.ring and a.target == b.target
        assert a.features.tobytes() == b.features.tobytes()
