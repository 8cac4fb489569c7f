"""Recovery benchmark: deletion protocol, error metrics, Fréchet shape similarity, probes."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from numba import njit

from .baselines import fill_sequence
from .csi_data import CsiSequence, simulate_loss
from .recovery import combine, predict

METRIC_NAMES = ("mse", "mae", "smape", "mape", "fss")
EPS = 1e-8


# -- pointwise --------------------------------------------------------------

def pointwise_metrics(truth, pred, deleted_positions, eps: float = EPS) -> dict[str, float]:
    """MSE, MAE, MAPE and SMAPE over the deleted slots, flattened over dimensions.

    ``truth`` and ``pred`` are ``(n, d)`` (or stacked ``(N, n, d)``) and
    ``deleted_positions`` is a boolean mask over slots of matching leading
    shape.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    sel = np.asarray(deleted_positions, dtype=bool)
    if not sel.any():
        raise ValueError("no deleted positions to score")
    y, yh = truth[sel], pred[sel]
    err = np.abs(y - yh)
    return {
        "mse": float(np.mean(err ** 2)),
        "mae": float(np.mean(err)),
        "smape": float(np.mean(err / ((np.abs(y) + np.abs(yh)) / 2 + eps))),
        "mape": float(np.mean(err / (np.abs(y) + eps))),
    }


# -- Fréchet ----------------------------------------------------------------

@njit(cache=True)
def _frechet_dp(p, q):
    n, m = p.size, q.size
    ca = np.empty((n, m))
    ca[0, 0] = abs(p[0] - q[0])
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], abs(p[i] - q[0]))
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], abs(p[0] - q[j]))
    for i in range(1, n):
        for j in range(1, m):
            best = min(ca[i - 1, j], ca[i, j - 1], ca[i - 1, j - 1])
            ca[i, j] = max(best, abs(p[i] - q[j]))
    return ca[n - 1, m - 1]


def frechet_discrete(P, Q) -> float:
    """Discrete Fréchet distance between two scalar curves, with |a - b| as point distance."""
    p = np.ascontiguousarray(P, dtype=np.float64).ravel()
    q = np.ascontiguousarray(Q, dtype=np.float64).ravel()
    if p.size == 0 or q.size == 0:
        raise ValueError("curves must be non-empty")
    return float(_frechet_dp(p, q))


def arc_length(curve) -> float:
    return float(np.abs(np.diff(np.asarray(curve, dtype=np.float64))).sum())


def fss(C, C_hat, eps: float = EPS) -> float:
    """Fréchet shape similarity averaged over dimensions.

    Per dimension: ``max(1 - dF / (sqrt(0.5 * len(C) * len(C_hat)) + eps), 0)``
    where ``len`` is the polyline arc length of the value curve.
    """
    C = np.asarray(C, dtype=np.float64)
    C_hat = np.asarray(C_hat, dtype=np.float64)
    if C.ndim == 1:
        C, C_hat = C[:, None], C_hat[:, None]
    if C.shape != C_hat.shape:
        raise ValueError("sequences must have the same shape")
    scores = np.empty(C.shape[1])
    for j in range(C.shape[1]):
        a, b = C[:, j], C_hat[:, j]
        denom = math.sqrt(0.5 * arc_length(a) * arc_length(b)) + eps
        scores[j] = max(1.0 - frechet_discrete(a, b) / denom, 0.0)
    return float(min(max(scores.mean(), 0.0), 1.0))


# -- protocol ---------------------------------------------------------------

@dataclass
class EvalPlan:
    deleted: np.ndarray          # (N, n) bool
    delete_rate: float
    seed: int

    def digest(self) -> str:
        h = hashlib.sha256(np.packbits(self.deleted).tobytes())
        h.update(f"{self.deleted.shape}|{self.delete_rate}|{self.seed}".encode())
        return h.hexdigest()[:16]


def make_plan(windows: Sequence[CsiSequence], delete_rate: float = 0.15, seed: int = 0) -> EvalPlan:
    """Delete ``round(rate * #observed)`` observed slots per window."""
    ss = np.random.SeedSequence(seed)
    deleted = np.zeros((len(windows), windows[0].n), dtype=bool)
    for i, (w, child) in enumerate(zip(windows, ss.spawn(len(windows)))):
        lossy = simulate_loss(w, delete_rate, "iid", int(child.generate_state(1)[0]))
        deleted[i] = lossy.pad_mask & ~w.pad_mask
    return EvalPlan(deleted, delete_rate, seed)


def apply_plan(windows: Sequence[CsiSequence], plan: EvalPlan) -> list[CsiSequence]:
    return [w.replace(pad_mask=w.pad_mask | plan.deleted[i]) for i, w in enumerate(windows)]


# A method takes the degraded windows and returns one recovery per window,
# None on failure, plus a per-window failure flag.
Method = Callable[[list[CsiSequence]], tuple[list[np.ndarray | None], list[bool]]]


def interpolation_method(name: str, params: dict | None = None) -> Method:
    def run(windows):
        out, failed = [], []
        for w in windows:
            try:
                res = fill_sequence(w, name, params)
            except (ValueError, np.linalg.LinAlgError):
                out.append(None)
                failed.append(True)
                continue
            out.append(res.sequence)
            failed.append(res.fallback)
        return out, failed
    run.__name__ = name
    return run


def csibert_methods(model, seed: int = 0, draws: int = 1) -> dict[str, Method]:
    """``csibert-recover`` and ``csibert-replace``; each runs its own seeded forward pass."""
    def make(mode):
        def run(windows):
            c_hat = predict(model, windows, seed, draws)
            out = [combine(w, c, mode).sequence for w, c in zip(windows, c_hat)]
            return out, [False] * len(windows)
        return run

    return {"csibert-recover": make("recover"), "csibert-replace": make("replace")}


def build_methods(names: Sequence[str], model=None, seed: int = 0,
                  interp_params: Mapping[str, dict] | None = None) -> dict[str, Method]:
    """Resolve method names (``csibert``, ``linear``, ``kriging``, ``idw``)."""
    interp_params = interp_params or {}
    methods: dict[str, Method] = {}
    for name in names:
        if name == "csibert":
            if model is None:
                raise ValueError("method 'csibert' needs a checkpoint")
            methods.update(csibert_methods(model, seed))
        elif name in ("linear", "kriging", "idw"):
            methods[name] = interpolation_method(name, interp_params.get(name))
        else:
            raise ValueError(f"unknown method {name!r}")
    return methods


@dataclass
class MetricsReport:
    methods: dict[str, dict]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v
        body = {"methods": {m: {k: clean(v) for k, v in r.items()} for m, r in self.methods.items()},
                "meta": self.meta}
        return json.dumps(body, indent=2, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _score(windows, truth, plan, recovered, failed):
    ok = [i for i in range(len(windows)) if not failed[i] and recovered[i] is not None]
    row = {k: float("nan") for k in METRIC_NAMES}
    if ok:
        t = np.stack([truth[i].values for i in ok])
        r = np.stack([recovered[i] for i in ok])
        d = plan.deleted[ok]
        if d.any():
            row.update(pointwise_metrics(t, r, d))
        scores = []
        for i in ok:
            keep = ~truth[i].pad_mask
            scores.append(fss(truth[i].values[keep], recovered[i][keep]))
        row["fss"] = float(np.mean(scores))
    row["windows_scored"] = len(ok)
    row["windows_failed"] = len(windows) - len(ok)
    return row


def run_protocol(windows: Sequence[CsiSequence], methods: Mapping[str, Method], delete_rate: float = 0.15,
                 seed: int = 0, truth: Sequence[CsiSequence] | None = None,
                 dataset_id: str = "") -> MetricsReport:
    """Score every method on the same deleted slots.

    Parameters
    ----------
    windows : sequence of CsiSequence
        Test windows; observed slots serve as ground truth for deletions.
    methods : mapping of name -> method
        See :func:`build_methods`.
    truth : sequence of CsiSequence, optional
        Complete ground truth (synthetic data). When given, FSS covers every
        slot; otherwise only slots observed before deletion.

    Pointwise metrics use the deleted slots only. Windows where a method
    fails (including a kriging fallback) are left out of its aggregates and
    counted in ``windows_failed``. Wall time is measured with one torch
    thread.
    """
    windows = list(windows)
    if not windows:
        raise ValueError("empty test set")
    plan = make_plan(windows, delete_rate, seed)
    degraded = apply_plan(windows, plan)
    reference = list(truth) if truth is not None else windows
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    rows = {}
    try:
        for name, method in methods.items():
            t0 = time.perf_counter()
            recovered, failed = method(degraded)
            seconds = time.perf_counter() - t0
            row = _score(windows, reference, plan, recovered, failed)
            row["wall_time_s"] = seconds
            rows[name] = row
    finally:
        torch.set_num_threads(prev_threads)
    meta = {"delete_rate": delete_rate, "seed": seed, "dataset_id": dataset_id,
            "num_windows": len(windows), "plan_digest": plan.digest(),
            "deleted_slots": int(plan.deleted.sum())}
    return MetricsReport(rows, meta)


def parse_rates(text: str) -> list[float]:
    """``"0.1:0.6:0.1"`` (inclusive) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"rate range must be start:stop:step, got {text!r}")
        lo, hi, step = (float(x) for x in parts)
        if step <= 0 or hi < lo:
            raise ValueError(f"rate range {text!r} needs step > 0 and stop >= start")
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + k * step, 10) for k in range(n)]
    rates = [float(x) for x in text.split(",") if x.strip()]
    if not rates:
        raise ValueError("no deletion rates given")
    return rates


SWEEP_COLUMNS = ["rate", "method", *METRIC_NAMES, "wall_time_s", "windows_scored", "windows_failed"]


def sweep(windows, methods: Mapping[str, Method], rates: Sequence[float], seed: int = 0,
          truth=None) -> list[dict]:
    """Run the protocol at each deletion rate; one row per (rate, method)."""
    rows = []
    for rate in rates:
        if not 0 < rate < 1:
            raise ValueError("deletion rates must lie in (0, 1)")
        report = run_protocol(windows, methods, rate, seed, truth)
        for name, r in report.methods.items():
            rows.append({"rate": rate, "method": name, **{k: r[k] for k in SWEEP_COLUMNS[2:]}})
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if isinstance(r[k], float) and math.isnan(r[k]) else r[k])
                        for k in SWEEP_COLUMNS})


# -- downstream probe -------------------------------------------------------

class ProbeNet(nn.Module):
    def __init__(self, n: int, d: int, num_classes: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Flatten(), nn.Linear(n * d, hidden), nn.ReLU(),
                                 nn.Linear(hidden, num_classes))

    def forward(self, x):
        return self.net(x)


def zero_filled(windows: Sequence[CsiSequence]) -> np.ndarray:
    """Lossy windows as stored: lost slots hold the zero sentinel."""
    return np.stack([w.values for w in windows])


def train_probe(X_train, y_train, X_test, y_test, num_classes: int, seed: int = 0,
                epochs: int = 60, lr: float = 1e-3, batch: int = 32) -> float:
    """Fit the feed-forward probe and return its test accuracy."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    mu = X_train.mean(axis=(0, 1))
    sd = X_train.std(axis=(0, 1)) + 1e-8
    Xtr = torch.as_tensor((X_train - mu) / sd, dtype=torch.float32)
    Xte = torch.as_tensor((X_test - mu) / sd, dtype=torch.float32)
    ytr = torch.as_tensor(y_train, dtype=torch.long)
    net = ProbeNet(X_train.shape[1], X_train.shape[2], num_classes)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(Xtr))
        for s in range(0, len(order), batch):
            idx = torch.as_tensor(order[s:s + batch])
            loss = F.cross_entropy(net(Xtr[idx]), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = net(Xte).argmax(dim=1).numpy()
    return float((pred == np.asarray(y_test)).mean())


def downstream_probe(variants: Mapping[str, np.ndarray], labels, seed: int = 0,
                     train_fraction: float = 0.7, epochs: int = 60,
                     shuffle_labels: bool = False) -> dict[str, float]:
    """Test accuracy of one fixed probe architecture per data variant.

    Every variant uses the same train/test split, initialization seed and
    schedule. ``shuffle_labels`` permutes the labels as a chance-level control.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("the probe needs at least two classes")
    num_classes = int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    if shuffle_labels:
        labels = rng.permutation(labels)
    order = rng.permutation(len(labels))
    cut = int(round(train_fraction * len(labels)))
    tr, te = order[:cut], order[cut:]
    out = {}
    for name, X in variants.items():
        X = np.asarray(X, dtype=np.float64)
        out[name] = train_probe(X[tr], labels[tr], X[te], labels[te], num_classes, seed, epochs)
    return out
