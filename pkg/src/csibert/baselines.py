"""Per-subcarrier interpolation over time: linear, ordinary kriging, IDW.

Each method treats one subcarrier as a 1-D series indexed by timestamp and
only fills pad slots. Queries outside the observed span are extrapolated
flat by linear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.optimize import nnls

from .csi_data import CsiSequence
from .recovery import RecoveryResult, provenance_for

VARIOGRAM_MODELS = ("spherical", "exponential", "gaussian")


class KrigingFailure(RuntimeError):
    """Variogram fit or kriging solve failed; callers fall back to linear."""


def linear_interp(times, values, query_times) -> np.ndarray:
    """Piecewise-linear interpolation with flat extrapolation at the edges."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    query_times = np.asarray(query_times, dtype=np.float64)
    if times.size == 0:
        raise ValueError("linear_interp needs at least one observed point")
    if times.size == 1:
        return np.full(query_times.shape, values[0])
    order = np.argsort(times)
    return np.interp(query_times, times[order], values[order])


# -- variograms -------------------------------------------------------------

def _shape(model: str, h: np.ndarray, rng: float) -> np.ndarray:
    # unit-sill structure, practical range for exponential/gaussian
    r = h / rng
    if model == "spherical":
        return np.where(r < 1, 1.5 * r - 0.5 * r ** 3, 1.0)
    if model == "exponential":
        return 1.0 - np.exp(-3.0 * r)
    if model == "gaussian":
        return 1.0 - np.exp(-3.0 * r ** 2)
    raise ValueError(f"unknown variogram model {model!r}")


@dataclass
class VariogramConfig:
    """Variogram family and parameters; ``None`` parameters are fitted.

    ``min_pairs`` and ``min_bins`` set how much lag support an automatic fit
    needs: at least ``min_bins`` lag classes each holding ``min_pairs`` pairs.
    """

    model: str = "exponential"
    nugget: float | None = None
    sill: float | None = None
    range: float | None = None
    min_pairs: int = 30
    min_bins: int = 3
    num_ranges: int = 40
    lag_width: float | None = None

    def __post_init__(self):
        if self.model not in VARIOGRAM_MODELS:
            raise ValueError(f"variogram model must be one of {VARIOGRAM_MODELS}")
        if self.nugget is not None and self.nugget < 0:
            raise ValueError("nugget must be >= 0")
        if self.nugget is not None and self.sill is not None and self.sill < self.nugget:
            raise ValueError("sill must be >= nugget")
        if self.range is not None and self.range <= 0:
            raise ValueError("range must be > 0")

    @property
    def fixed(self) -> bool:
        return None not in (self.nugget, self.sill, self.range)

    def gamma(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        g = self.nugget + (self.sill - self.nugget) * _shape(self.model, h, self.range)
        return np.where(h == 0, 0.0, g)


def empirical_variogram(times, values, lag_width: float, max_lag: float):
    """Binned semivariance for one or many series sharing ``times``.

    Returns ``(lag_centres, gamma, pair_counts)``; ``values`` of shape (m,) or
    (m, k) gives ``gamma`` of shape (bins,) or (bins, k).
    """
    times = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    i, j = np.triu_indices(times.size, k=1)
    h = np.abs(times[i] - times[j])
    nbins = max(int(np.ceil(max_lag / lag_width)), 1)
    b = np.floor(h / lag_width).astype(np.int64)
    keep = b < nbins
    b = b[keep]
    sq = 0.5 * (v[i[keep]] - v[j[keep]]) ** 2
    counts = np.bincount(b, minlength=nbins)
    if sq.ndim == 1:
        sums = np.bincount(b, weights=sq, minlength=nbins)
        gamma = sums / np.maximum(counts, 1)
    else:
        gamma = np.stack([np.bincount(b, weights=sq[:, c], minlength=nbins)
                          for c in range(sq.shape[1])], axis=1) / np.maximum(counts, 1)[:, None]
    centres = (np.arange(nbins) + 0.5) * lag_width
    return centres, gamma, counts


def fit_variogram(lags, gamma, counts, cfg: VariogramConfig) -> VariogramConfig:
    """Weighted least-squares fit of nugget, sill and range.

    The range is searched on a grid; for each candidate, nugget and partial
    sill follow from a non-negative least-squares solve weighted by pair
    counts. Raises :class:`KrigingFailure` without enough lag support.
    """
    ok = counts >= cfg.min_pairs
    if ok.sum() < cfg.min_bins:
        raise KrigingFailure(f"only {int(ok.sum())} lag classes with >= {cfg.min_pairs} pairs")
    h, g, w = lags[ok], gamma[ok], np.sqrt(counts[ok].astype(np.float64))
    if not np.all(np.isfinite(g)):
        raise KrigingFailure("non-finite semivariance")
    best = None
    for rng in np.geomspace(h.min(), 2.0 * h.max(), cfg.num_ranges):
        A = np.stack([np.ones_like(h), _shape(cfg.model, h, rng)], axis=1) * w[:, None]
        coef, resid = nnls(A, g * w)
        if best is None or resid < best[0]:
            best = (resid, coef, rng)
    _, (nug, psill), rng = best
    if psill + nug <= 0:
        raise KrigingFailure("degenerate variogram (zero sill)")
    return replace(cfg, nugget=float(nug), sill=float(nug + psill), range=float(rng))


def _auto_lags(times: np.ndarray, lag_width: float | None) -> tuple[float, float]:
    st = np.sort(times)
    if lag_width is None:
        spacing = np.diff(st)
        lag_width = float(np.median(spacing[spacing > 0])) if np.any(spacing > 0) else 1.0
    return lag_width, 0.5 * float(st[-1] - st[0])


def _ok_solve(times, values, queries, vg: VariogramConfig) -> np.ndarray:
    m = times.size
    G = np.empty((m + 1, m + 1))
    G[:m, :m] = vg.gamma(np.abs(times[:, None] - times[None, :]))
    G[m, :m] = G[:m, m] = 1.0
    G[m, m] = 0.0
    rhs = np.empty((m + 1, queries.size))
    rhs[:m] = vg.gamma(np.abs(times[:, None] - queries[None, :]))
    rhs[m] = 1.0
    try:
        lu = linalg.lu_factor(G, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise KrigingFailure(f"kriging system: {exc}") from None
    if np.any(np.abs(np.diag(lu[0])) < 1e-12 * max(np.abs(G).max(), 1e-300)):
        raise KrigingFailure("singular kriging system")
    weights = linalg.lu_solve(lu, rhs)[:m]
    if not np.all(np.isfinite(weights)):
        raise KrigingFailure("non-finite kriging weights")
    return weights.T @ values


def kriging_interp(times, values, queries, cfg: VariogramConfig | None = None,
                   full_output: bool = False):
    """Ordinary kriging of a 1-D series at ``queries``.

    Unfixed variogram parameters are fitted to the empirical semivariogram
    (lag width = ``cfg.lag_width`` or the median observed spacing, lags up
    to half the span). Fewer
    than three points, too little lag support, or a singular system make the
    function fall back to :func:`linear_interp`.

    Returns
    -------
    values : ndarray
    reason : str or None
        Only with ``full_output``; why the fallback was taken, else None.
    """
    cfg = cfg or VariogramConfig()
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    reason = None
    try:
        if times.size < 3:
            raise KrigingFailure(f"{times.size} observed points; need 3")
        vg = cfg
        if not cfg.fixed:
            lag_width, max_lag = _auto_lags(times, cfg.lag_width)
            lags, gamma, counts = empirical_variogram(times, values, lag_width, max_lag)
            vg = fit_variogram(lags, gamma, counts, cfg)
        out = _ok_solve(times, values, queries, vg)
    except KrigingFailure as exc:
        reason = str(exc)
        out = linear_interp(times, values, queries)
    return (out, reason) if full_output else out


def _kriging_columns(times, values, queries, cfg: VariogramConfig):
    """Krige every column of ``values``; shares the pair bookkeeping across columns."""
    m, d = values.shape
    out = np.empty((queries.size, d))
    reasons: list[str] = []
    if m < 3 or cfg.fixed:
        for j in range(d):
            out[:, j], r = kriging_interp(times, values[:, j], queries, cfg, full_output=True)
            if r:
                reasons.append(r)
        return out, reasons
    lag_width, max_lag = _auto_lags(times, cfg.lag_width)
    lags, gamma, counts = empirical_variogram(times, values, lag_width, max_lag)
    for j in range(d):
        try:
            vg = fit_variogram(lags, gamma[:, j], counts, cfg)
            out[:, j] = _ok_solve(times, values[:, j], queries, vg)
        except KrigingFailure as exc:
            reasons.append(str(exc))
            out[:, j] = linear_interp(times, values[:, j], queries)
    return out, reasons


def idw_interp(times, values, queries, power: float = 2.0, k: int = 8) -> np.ndarray:
    """Inverse-distance weighting over the ``k`` nearest observed times."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if times.size == 0:
        raise ValueError("idw_interp needs at least one observed point")
    k = min(k, times.size)
    dist = np.abs(queries[:, None] - times[None, :])
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    dk = np.take_along_axis(dist, nearest, axis=1)
    vk = values[nearest] if values.ndim == 1 else values[nearest]
    exact = dk[:, 0] == 0
    with np.errstate(divide="ignore"):
        w = np.where(dk > 0, dk ** -power, 0.0)
    if values.ndim == 1:
        out = (w * vk).sum(axis=1) / np.where(exact, 1.0, w.sum(axis=1))
        out[exact] = vk[exact, 0]
    else:
        out = np.einsum("qk,qkd->qd", w, vk) / np.where(exact, 1.0, w.sum(axis=1))[:, None]
        out[exact] = vk[exact, 0]
    return out


METHODS = ("linear", "kriging", "idw")


def fill_sequence(seq: CsiSequence, method: str, params: dict | None = None) -> RecoveryResult:
    """Fill the pad slots of ``seq`` subcarrier by subcarrier.

    ``params``: ``variogram`` (a :class:`VariogramConfig`) for kriging,
    ``power`` and ``k`` for IDW. The result's ``fallback`` flag is set when
    kriging fell back to linear interpolation on any subcarrier.
    """
    params = params or {}
    out = seq.values.copy()
    pad = seq.pad_mask
    fallback = False
    if pad.any():
        obs = ~pad
        t_obs, t_q = seq.timestamps[obs], seq.timestamps[pad]
        v_obs = seq.values[obs]
        if not obs.any():
            raise ValueError("cannot interpolate a window with no observed slot")
        if method == "linear":
            filled = np.stack([linear_interp(t_obs, v_obs[:, j], t_q) for j in range(seq.dim)], axis=1)
        elif method == "kriging":
            vg = params.get("variogram") or VariogramConfig()
            if vg.lag_width is None:
                vg = replace(vg, lag_width=1000.0 / seq.rate_hz)
            filled, reasons = _kriging_columns(t_obs, v_obs, t_q, vg)
            fallback = bool(reasons)
        elif method == "idw":
            filled = idw_interp(t_obs, v_obs, t_q, params.get("power", 2.0), params.get("k", 8))
        else:
            raise ValueError(f"unknown interpolation method {method!r}; choose from {METHODS}")
        out[pad] = filled
    return RecoveryResult(out, "recover", provenance_for(pad), fallback)


INTERPOLATORS: dict[str, Callable] = {
    "linear": linear_interp,
    "kriging": kriging_interp,
    "idw": idw_interp,
}
