import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csibert.baselines import (KrigingFailure, VariogramConfig, empirical_variogram,
                               fill_sequence, fit_variogram, idw_interp, kriging_interp,
                               linear_interp)
from csibert.csi_data import CsiSequence

from oracles import idw_direct, kriging_dense


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-100, 100), b=st.floats(-100, 100), seed=st.integers(0, 10_000))
def test_linear_exact_on_affine(a, b, seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.choice(1000, size=12, replace=False)).astype(float)
    q = rng.uniform(t[0], t[-1], size=20)
    out = linear_interp(t, a * t + b, q)
    np.testing.assert_allclose(out, a * q + b, rtol=0, atol=1e-12 * max(1, abs(a) * 1000 + abs(b)))


def test_linear_flat_extrapolation_and_edge_cases():
    assert linear_interp([1.0, 2.0], [5.0, 7.0], [0.0, 3.0]).tolist() == [5.0, 7.0]
    assert linear_interp([4.0], [9.0], [0.0, 10.0]).tolist() == [9.0, 9.0]
    with pytest.raises(ValueError):
        linear_interp([], [], [1.0])


@pytest.mark.parametrize("p", [1, 2, 4])
def test_idw_midpoint_is_average(p):
    assert idw_interp([0.0, 2.0], [3.0, 7.0], [1.0], power=p)[0] == pytest.approx(5.0, abs=1e-12)


def test_idw_matches_direct_loops():
    rng = np.random.default_rng(3)
    t = np.sort(rng.uniform(0, 100, 30))
    v = rng.normal(size=30)
    q = rng.uniform(0, 100, 15)
    for p, k in ((1, 3), (2, 8), (3, 30)):
        got = idw_interp(t, v, q, p, k)
        want = [idw_direct(t, v, x, p, k) for x in q]
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_idw_exact_hit_and_columns():
    t = np.array([0.0, 1.0, 2.0])
    v = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    out = idw_interp(t, v, np.array([1.0, 0.5]))
    np.testing.assert_allclose(out[0], [2.0, 20.0])
    np.testing.assert_allclose(out[1, 1], 10 * out[1, 0])


def test_pure_nugget_kriging_is_mean():
    rng = np.random.default_rng(0)
    t = np.sort(rng.uniform(0, 50, 25))
    v = rng.normal(3, 2, 25)
    cfg = VariogramConfig(model="spherical", nugget=1.7, sill=1.7, range=5.0)
    q = np.array([0.37, 12.345, 49.9])
    q = q[~np.isin(q, t)]
    out = kriging_interp(t, v, q, cfg)
    np.testing.assert_allclose(out, v.mean(), atol=1e-9)


@pytest.mark.parametrize("model", ["spherical", "exponential", "gaussian"])
def test_kriging_matches_dense_solve(model):
    rng = np.random.default_rng(1)
    t = np.sort(rng.choice(200, 20, replace=False)).astype(float)
    v = np.sin(t / 15) + rng.normal(0, 0.1, 20)
    cfg = VariogramConfig(model=model, nugget=0.01, sill=1.0, range=40.0)
    q = np.array([3.5, 77.2, 150.0])
    np.testing.assert_allclose(kriging_interp(t, v, q, cfg), kriging_dense(t, v, q, cfg.gamma),
                               rtol=1e-9, atol=1e-9)


def test_kriging_honours_data_without_nugget():
    t = np.array([0.0, 10.0, 20.0, 35.0])
    v = np.array([1.0, -2.0, 0.5, 4.0])
    cfg = VariogramConfig(nugget=0.0, sill=2.0, range=30.0)
    np.testing.assert_allclose(kriging_interp(t, v, t, cfg), v, atol=1e-9)


def test_variogram_fit_recovers_parameters():
    cfg = VariogramConfig(model="exponential", nugget=0.2, sill=1.5, range=25.0)
    lags = np.arange(1, 40) + 0.5
    fitted = fit_variogram(lags, cfg.gamma(lags), np.full(lags.size, 100), VariogramConfig(num_ranges=400))
    assert fitted.nugget == pytest.approx(0.2, abs=0.02)
    assert fitted.sill == pytest.approx(1.5, abs=0.05)
    assert fitted.range == pytest.approx(25.0, rel=0.05)


def test_empirical_variogram_hand_example():
    t = np.array([0.0, 1.0, 2.0])
    v = np.array([0.0, 2.0, 6.0])
    lags, gamma, counts = empirical_variogram(t, v, 1.0, 3.0)
    # lag 1: pairs (0,2),(2,6) -> 0.5*(4+16)/2 = 5 ; lag 2: pair (0,6) -> 18
    assert counts.tolist() == [0, 2, 1]
    assert gamma.tolist() == [0.0, 5.0, 18.0]


def test_kriging_falls_back():
    out, reason = kriging_interp([0.0, 1.0], [1.0, 3.0], [0.5], full_output=True)
    assert out[0] == 2.0 and "need 3" in reason
    t = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    out, reason = kriging_interp(t, t ** 2, [2.5], full_output=True)
    assert "lag classes" in reason
    assert out[0] == pytest.approx(6.5)
    with pytest.raises(KrigingFailure):
        fit_variogram(np.arange(5.0), np.ones(5), np.full(5, 2), VariogramConfig())


def test_variogram_config_validation():
    with pytest.raises(ValueError):
        VariogramConfig(model="cubic")
    with pytest.raises(ValueError):
        VariogramConfig(nugget=2.0, sill=1.0)


def _seq(n=100, d=3, loss=0.2, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * 10.0
    v = np.sin(t[:, None] / np.array([50.0, 80.0, 120.0])[:d]) * 5 + rng.normal(0, 0.2, (n, d))
    pad = rng.random(n) < loss
    pad[[0, -1]] = False
    return CsiSequence(t, v, pad)


@pytest.mark.parametrize("method", ["linear", "kriging", "idw"])
def test_fill_sequence_keeps_observed(method):
    s = _seq()
    res = fill_sequence(s, method)
    np.testing.assert_array_equal(res.sequence[~s.pad_mask], s.values[~s.pad_mask])
    assert (res.provenance == "filled").sum() == s.pad_mask.sum()
    assert np.all(np.isfinite(res.sequence))
    assert not res.fallback


def test_fill_sequence_kriging_fallback_flag():
    s = _seq(n=100, loss=0.85, seed=2)
    assert fill_sequence(s, "kriging").fallback
    with pytest.raises(ValueError):
        fill_sequence(s, "spline")


def test_fill_sequence_all_pad_raises():
    s = CsiSequence(np.arange(5) * 10.0, np.zeros((5, 2)), np.ones(5, bool))
    with pytest.raises(ValueError):
        fill_sequence(s, "linear")
