import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csibert.csi_data import CsiSequence
from csibert.metrics import (SWEEP_COLUMNS, MetricsReport, apply_plan, arc_length,
                             build_methods, downstream_probe, frechet_discrete, fss, make_plan,
                             parse_rates, pointwise_metrics, run_protocol, sweep,
                             write_sweep_csv, zero_filled)

from oracles import arc_length_loop, frechet_bruteforce

curves = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=6)


def test_frechet_hand_examples():
    assert frechet_discrete([0, 1, 2], [0, 1, 2]) == 0
    assert frechet_discrete([0, 0, 0], [1]) == 1
    # Q has to pass 3 while P stays at 0 or 2 -> at least 1
    assert frechet_discrete([0, 2], [0, 3, 2]) == 1
    assert frechet_discrete([0, 10, 0], [0, 0]) == 10


@settings(max_examples=300, deadline=None)
@given(P=curves, Q=curves)
def test_frechet_matches_bruteforce(P, Q):
    assert frechet_discrete(P, Q) == frechet_bruteforce(P, Q)


@settings(max_examples=200, deadline=None)
@given(P=curves, Q=curves)
def test_frechet_properties(P, Q):
    d = frechet_discrete(P, Q)
    assert d == frechet_discrete(Q, P)
    assert d >= abs(P[0] - Q[0]) and d >= abs(P[-1] - Q[-1])
    assert d <= max(abs(p - q) for p in P for q in Q)


def test_frechet_rejects_empty():
    with pytest.raises(ValueError):
        frechet_discrete([], [1.0])


@settings(max_examples=100, deadline=None)
@given(C=st.lists(st.lists(st.floats(-20, 20), min_size=3, max_size=3), min_size=2, max_size=12),
       seed=st.integers(0, 1000))
def test_fss_properties(C, seed):
    C = np.array(C)
    noise = np.random.default_rng(seed).normal(0, 3, C.shape)
    D = C + noise
    s = fss(C, D)
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(fss(D, C), abs=1e-12)
    assert fss(C, C) == 1.0 or np.all(np.ptp(C, axis=0) == 0)


def test_fss_hand_example():
    a = np.array([0.0, 2.0, 0.0])    # length 4
    b = np.array([0.0, 1.0, 0.0])    # length 2, dF = 1
    assert fss(a, b) == pytest.approx(1 - 1 / (np.sqrt(0.5 * 4 * 2) + 1e-8), rel=1e-12)
    assert arc_length(a) == arc_length_loop(list(a))
    assert fss(a, a + 100) == 0.0


def test_pointwise_hand_example():
    truth = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, -6.0]])
    pred = np.array([[9.0, 9.0], [4.0, 2.0], [5.0, -3.0]])
    sel = np.array([False, True, True])
    m = pointwise_metrics(truth, pred, sel)
    err = np.array([1.0, 2.0, 0.0, 3.0])
    y = np.array([3.0, 4.0, 5.0, -6.0])
    yh = np.array([4.0, 2.0, 5.0, -3.0])
    assert m["mse"] == pytest.approx(np.mean(err ** 2))
    assert m["mae"] == pytest.approx(1.5)
    assert m["mape"] == pytest.approx(np.mean(err / (np.abs(y) + 1e-8)))
    assert m["smape"] == pytest.approx(np.mean(err / ((np.abs(y) + np.abs(yh)) / 2 + 1e-8)))
    with pytest.raises(ValueError):
        pointwise_metrics(truth, pred, np.zeros(3, bool))


def _windows(N=12, n=60, d=4, seed=0, loss=0.1):
    rng = np.random.default_rng(seed)
    out, truth = [], []
    for i in range(N):
        t = np.arange(n) * 10.0
        v = np.sin(t[:, None] / (40 + 10 * np.arange(d))) * 4 + rng.normal(0, 0.1, (n, d))
        pad = rng.random(n) < loss
        pad[0] = False
        truth.append(CsiSequence(t, v, np.zeros(n, bool)))
        out.append(CsiSequence(t, v, pad))
    return out, truth


def test_plan_counts_and_determinism():
    w, _ = _windows()
    plan = make_plan(w, 0.15, seed=3)
    for i, win in enumerate(w):
        assert not (plan.deleted[i] & win.pad_mask).any()
        assert plan.deleted[i].sum() == int(np.floor(0.15 * (~win.pad_mask).sum() + 0.5 + 1e-9))
    assert make_plan(w, 0.15, 3).digest() == plan.digest()
    assert make_plan(w, 0.15, 4).digest() != plan.digest()
    degraded = apply_plan(w, plan)
    assert all(np.array_equal(d.pad_mask, win.pad_mask | plan.deleted[i])
               for i, (d, win) in enumerate(zip(degraded, w)))


def test_run_protocol_same_plan_for_every_method():
    w, truth = _windows()
    seen = []

    def spy(windows):
        seen.append(np.stack([x.pad_mask for x in windows]))
        return [x.values.copy() for x in windows], [False] * len(windows)

    methods = {"a": spy, "b": spy, **build_methods(["linear", "idw"])}
    rep = run_protocol(w, methods, 0.2, seed=1, truth=truth)
    np.testing.assert_array_equal(seen[0], seen[1])
    assert rep.meta["plan_digest"] == make_plan(w, 0.2, 1).digest()
    assert rep.methods["linear"]["mse"] < rep.methods["a"]["mse"]
    assert rep.methods["linear"]["windows_failed"] == 0
    assert set(json_keys(rep)) >= {"mse", "mae", "smape", "mape", "fss", "wall_time_s"}


def json_keys(rep: MetricsReport):
    return json.loads(rep.to_json())["methods"]["linear"].keys()


def test_failed_windows_excluded_and_counted():
    w, truth = _windows(N=6)

    def flaky(windows):
        out = [x.values.copy() for x in windows]
        out[2] = None
        failed = [i == 4 for i in range(len(windows))]
        return out, failed

    row = run_protocol(w, {"f": flaky}, 0.15).methods["f"]
    assert row["windows_failed"] == 2 and row["windows_scored"] == 4


def test_kriging_failure_counted_at_high_rate():
    w, truth = _windows(N=5, n=100, loss=0.15)
    rep = run_protocol(w, build_methods(["kriging"]), 0.6, truth=truth)
    assert rep.methods["kriging"]["windows_failed"] >= 1


def test_parse_rates():
    assert parse_rates("0.1:0.6:0.1") == pytest.approx([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    assert parse_rates("0.15,0.3") == [0.15, 0.3]
    for bad in ("0.5:0.1:0.1", "0.1:0.5:0", "", "0.1:0.5"):
        with pytest.raises(ValueError):
            parse_rates(bad)


def test_sweep_rows_and_csv(tmp_path):
    w, truth = _windows(N=4)
    rows = sweep(w, build_methods(["linear", "idw"]), [0.1, 0.3], truth=truth)
    assert len(rows) == 4 and set(rows[0]) == set(SWEEP_COLUMNS)
    write_sweep_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS) and len(lines) == 5


def test_probe_separates_signal_from_chance():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(4), 30)
    X = rng.normal(size=(120, 10, 3))
    X[np.arange(120), labels * 2, 0] += 4.0
    acc = downstream_probe({"x": X}, labels, seed=0, epochs=40)
    ctl = downstream_probe({"x": X}, labels, seed=0, epochs=40, shuffle_labels=True)
    assert acc["x"] > 0.8 and ctl["x"] < 0.5


def test_zero_filled_keeps_sentinel():
    w, _ = _windows(N=2)
    z = zero_filled(w)
    assert np.all(z[0][w[0].pad_mask] == 0.0)
