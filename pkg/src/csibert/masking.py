"""Mask plans for masked-sequence pretraining and recovery.

Two kinds of hidden slot exist. *Pad* slots have no data at all and are kept
out of attention. *Mask* slots are observed slots whose values are hidden
behind a Gaussian draw matched to the per-dimension statistics of the window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_RATIO = 0.15
MAX_RATIO = 0.70


@dataclass(frozen=True)
class MaskPlan:
    mask_positions: frozenset[int]
    pad_positions: frozenset[int]
    ratio_used: float

    def __post_init__(self):
        if self.mask_positions & self.pad_positions:
            raise ValueError("mask and pad positions must be disjoint")

    def mask_array(self, n: int) -> np.ndarray:
        out = np.zeros(n, dtype=bool)
        out[list(self.mask_positions)] = True
        return out


def sample_ratio(seed) -> float:
    """Uniform masking proportion in [0.15, 0.70].

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(seed)
    return float(rng.uniform(MIN_RATIO, MAX_RATIO))


def mask_count(ratio: float, available: int) -> int:
    # round half up; the slack absorbs products like 0.7 * 85 = 59.4999...
    return int(np.floor(ratio * available + 0.5 + 1e-9))


def build_mask_plan(pad_mask, ratio: float, seed) -> MaskPlan:
    """Choose ``round(ratio * #non-pad)`` non-pad slots uniformly without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("mask ratio must satisfy 0 <= ratio < 1")
    pad_mask = np.asarray(pad_mask, dtype=bool)
    candidates = np.flatnonzero(~pad_mask)
    pads = frozenset(int(i) for i in np.flatnonzero(pad_mask))
    k = mask_count(ratio, candidates.size)
    if k == 0:
        return MaskPlan(frozenset(), pads, ratio)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(candidates, size=k, replace=False)
    return MaskPlan(frozenset(int(i) for i in chosen), pads, ratio)


def materialize(values, plan: MaskPlan, mu, sigma, seed, pad_value: float = 0.0) -> np.ndarray:
    """Return a copy of ``values`` with mask slots drawn from N(mu_j, sigma_j).

    ``sigma`` is a standard deviation. Pad slots are set to ``pad_value``.
    """
    out = np.array(values, dtype=np.float64, copy=True)
    n, d = out.shape
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (d,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (d,))
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    masked = plan.mask_array(n)
    if masked.any():
        rng = np.random.default_rng(seed)
        out[masked] = mu + sigma * rng.standard_normal((int(masked.sum()), d))
    if plan.pad_positions:
        out[list(plan.pad_positions)] = pad_value
    return out


def attention_mask(pad_mask) -> np.ndarray:
    """Key-side attend-allowed vector(s): False at pad slots.

    Broadcasts over queries; every query may attend every non-pad key. Works
    on a single ``(n,)`` mask or a batch ``(b, n)``.
    """
    return ~np.asarray(pad_mask, dtype=bool)
