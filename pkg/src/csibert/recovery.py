"""Fill lost slots with a pretrained model.

Lost slots are turned into mask slots (Gaussian draws from the window's
observed statistics) and the whole window is attended. ``replace`` returns
the model output everywhere; ``recover`` keeps observed slots and takes the
model output only where packets were lost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .csi_data import CsiSequence
from .masking import MaskPlan, materialize
from .model import CSIBERT, StandardStats, load_checkpoint

MODES = ("recover", "replace")
OBSERVED = "observed"
FILLED = "filled"


@dataclass
class RecoveryResult:
    sequence: np.ndarray
    mode: str
    provenance: np.ndarray
    fallback: bool = False

    @property
    def filled(self) -> np.ndarray:
        return self.provenance == FILLED

    def to_sequence(self, like: CsiSequence) -> CsiSequence:
        return CsiSequence(like.timestamps, self.sequence, np.zeros(like.n, dtype=bool),
                           like.rate_hz, like.labels)


def provenance_for(pad_mask: np.ndarray) -> np.ndarray:
    return np.where(pad_mask, FILLED, OBSERVED)


def _model_from(checkpoint) -> CSIBERT:
    if isinstance(checkpoint, CSIBERT):
        return checkpoint
    return load_checkpoint(checkpoint)[0]


def predict(model: CSIBERT, seqs: Sequence[CsiSequence], seed: int = 0, draws: int = 1,
            batch: int = 256) -> np.ndarray:
    """Model output C_hat for each window, shape (N, n, d).

    With ``draws > 1`` the output is averaged over independent mask draws.
    """
    model.eval()
    rng = np.random.default_rng(seed)
    g_mu = model.global_mu.double().numpy()
    g_sigma = model.global_sigma.double().numpy()
    out = []
    for start in range(0, len(seqs), batch):
        chunk = seqs[start:start + batch]
        total = None
        for _ in range(draws):
            inputs, mus, sigmas = [], [], []
            for s in chunk:
                obs = ~s.pad_mask
                if obs.any():
                    mu, sigma = s.values[obs].mean(axis=0), s.values[obs].std(axis=0)
                else:
                    mu, sigma = g_mu, g_sigma
                plan = MaskPlan(frozenset(int(i) for i in np.flatnonzero(s.pad_mask)), frozenset(), 0.0)
                inputs.append(materialize(s.values, plan, mu, sigma, rng))
                mus.append(mu)
                sigmas.append(sigma)
            x = torch.as_tensor(np.stack(inputs), dtype=torch.float32)
            t = torch.as_tensor(np.stack([s.timestamps for s in chunk]), dtype=torch.float32)
            no_pad = torch.zeros(x.shape[:2], dtype=torch.bool)
            stats = StandardStats(torch.as_tensor(np.stack(mus), dtype=torch.float32),
                                  torch.as_tensor(np.stack(sigmas), dtype=torch.float32))
            with torch.no_grad():
                y = model(x, t, no_pad, stats).double().numpy()
            total = y if total is None else total + y
        out.append(total / draws)
    return np.concatenate(out)


def combine(seq: CsiSequence, c_hat: np.ndarray, mode: str) -> RecoveryResult:
    """Apply the recover/replace rule to one window."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "replace":
        values = np.array(c_hat, dtype=np.float64)
    else:
        is_pad = seq.pad_mask[:, None]
        values = np.where(is_pad, c_hat, seq.values)
    return RecoveryResult(values, mode, provenance_for(seq.pad_mask))


def recover(seq: CsiSequence, checkpoint, mode: str = "recover", seed: int = 0,
            draws: int = 1) -> RecoveryResult:
    """Recover one lossy window with a pretrained model."""
    return recover_many([seq], checkpoint, mode, seed, draws)[0]


def recover_many(seqs: Sequence[CsiSequence], checkpoint, mode: str = "recover", seed: int = 0,
                 draws: int = 1) -> list[RecoveryResult]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    model = _model_from(checkpoint)
    n = model.cfg.input_length
    for s in seqs:
        if s.n != n or s.dim != model.cfg.input_dim:
            raise ValueError(f"window shape {(s.n, s.dim)} does not match the model "
                             f"{(n, model.cfg.input_dim)}")
    c_hat = predict(model, list(seqs), seed, draws)
    return [combine(s, c, mode) for s, c in zip(seqs, c_hat)]
