"""Pretraining with the five-part mixed loss, and head-only fine-tuning."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .csi_data import CsiSequence
from .masking import build_mask_plan, materialize, sample_ratio
from .model import CSIBERT, ModelConfig, StandardStats, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "ratio", "L1", "L2", "L3", "L4", "L5", "L1m", "L2m", "L3m", "total"]


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; the last good checkpoint is kept."""


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 0.0005
    batch: int = 64
    epochs: int = 30
    seed: int = 0
    checkpoint_dir: str | None = None
    num_threads: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")


@dataclass
class LossBreakdown:
    L1: torch.Tensor
    L2: torch.Tensor
    L3: torch.Tensor
    L4: torch.Tensor
    L5: torch.Tensor
    L1m: torch.Tensor
    L2m: torch.Tensor
    L3m: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _region_stats(x, w):
    # w: (b, n, 1) weights; returns per-window mean/std over weighted slots
    count = w.sum(dim=1).clamp_min(1.0)
    mu = (x * w).sum(dim=1) / count
    var = (((x - mu.unsqueeze(1)) * w) ** 2).sum(dim=1) / count
    # clamp keeps the sqrt differentiable when a region has one slot
    return mu, var.clamp_min(1e-12).sqrt()


def _reconstruction_terms(C, C_hat, region):
    """MSE over ``region`` plus MSE of per-window mean and std (over time)."""
    w = region.to(C.dtype).unsqueeze(-1)
    cells = w.sum() * C.shape[-1]
    if cells == 0:
        zero = C_hat.sum() * 0.0
        return zero, zero, zero
    l1 = (((C - C_hat) ** 2) * w).sum() / cells
    has = region.any(dim=1)
    mu, sd = _region_stats(C, w)
    mu_h, sd_h = _region_stats(C_hat, w)
    l2 = ((mu - mu_h) ** 2)[has].mean()
    l3 = ((sd - sd_h) ** 2)[has].mean()
    return l1, l2, l3


def mixed_loss(C, C_hat, pad_mask, mask, disc_real_logits=None, disc_fake_logits=None,
               cfg: ModelConfig | None = None) -> LossBreakdown:
    """Five-part loss plus its mask-only recomputation.

    Parameters
    ----------
    C, C_hat : tensor (b, n, d)
        Ground truth (values at pad slots are ignored) and reconstruction.
    pad_mask, mask : bool tensor (b, n)
        Real losses and artificially masked slots.
    disc_real_logits, disc_fake_logits : tensor (b, 2), optional
        Discriminator outputs for the real and the generated windows. When
        omitted (or with ``no_discriminator``) the adversarial terms are 0.
    """
    cfg = cfg or ModelConfig()
    C = torch.as_tensor(C)
    C_hat = torch.as_tensor(C_hat, dtype=C.dtype)
    pad_mask = torch.as_tensor(pad_mask, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool) & ~pad_mask
    l1, l2, l3 = _reconstruction_terms(C, C_hat, ~pad_mask)
    l1m, l2m, l3m = _reconstruction_terms(C, C_hat, mask)
    zero = C_hat.sum() * 0.0
    if cfg.no_discriminator or disc_real_logits is None or disc_fake_logits is None:
        l4 = l5 = zero
    else:
        b = disc_real_logits.shape[0]
        l4 = F.cross_entropy(disc_real_logits, torch.zeros(b, dtype=torch.long))
        l5 = F.cross_entropy(disc_fake_logits, torch.ones(disc_fake_logits.shape[0], dtype=torch.long))
    w = cfg.loss_weights
    total = (w[0] * l1 + w[1] * l2 + w[2] * l3 + w[3] * l4 + w[4] * l5
             + cfg.mask_loss_weight * (l1m + l2m + l3m))
    return LossBreakdown(l1, l2, l3, l4, l5, l1m, l2m, l3m, total)


def stack_windows(seqs: Sequence[CsiSequence]):
    values = np.stack([s.values for s in seqs])
    times = np.stack([s.timestamps for s in seqs])
    pads = np.stack([s.pad_mask for s in seqs])
    return values, times, pads


def global_stats(seqs: Sequence[CsiSequence]) -> tuple[np.ndarray, np.ndarray]:
    obs = np.concatenate([s.values[~s.pad_mask] for s in seqs])
    if obs.size == 0:
        d = seqs[0].dim
        return np.zeros(d), np.ones(d)
    return obs.mean(axis=0), obs.std(axis=0)


def window_stats(values: np.ndarray, observed: np.ndarray, fallback) -> tuple[np.ndarray, np.ndarray]:
    if not observed.any():
        return fallback
    v = values[observed]
    return v.mean(axis=0), v.std(axis=0)


def prepare_epoch(values, pads, ratio: float, rng: np.random.Generator, fallback):
    """Mask plans and materialized inputs for one epoch.

    Statistics for the Gaussian mask draws come from the slots that are
    neither padded nor masked.
    """
    N, n, d = values.shape
    inputs = np.empty_like(values)
    masks = np.zeros((N, n), dtype=bool)
    mus = np.empty((N, d))
    sigmas = np.empty((N, d))
    for i in range(N):
        plan = build_mask_plan(pads[i], ratio, rng)
        m = plan.mask_array(n)
        mu, sigma = window_stats(values[i], ~pads[i] & ~m, fallback)
        inputs[i] = materialize(values[i], plan, mu, sigma, rng)
        masks[i], mus[i], sigmas[i] = m, mu, sigma
    return inputs, masks, mus, sigmas


def _write_log(path: Path, history: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow(row)


@dataclass
class PretrainResult:
    model: CSIBERT
    history: list[dict]
    checkpoint: Path | None


def pretrain(dataset: Sequence[CsiSequence], model_cfg: ModelConfig, train_cfg: TrainConfig,
             model: CSIBERT | None = None) -> PretrainResult:
    """Self-supervised pretraining on lossy windows.

    Every epoch draws one masking ratio, re-draws the mask plan of every
    window, and takes one Adam step per batch on the mixed loss. The
    discriminator is trained in the same backward pass; the gradient reversal
    layer turns its loss into an adversarial signal for the trunk and the
    recoverer. When ``checkpoint_dir`` is set, ``checkpoint.pt`` and
    ``train_log.csv`` are rewritten after each epoch.
    """
    if len(dataset) == 0:
        raise ValueError("empty pretraining set")
    torch.set_num_threads(train_cfg.num_threads)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    if model is None:
        model = CSIBERT(model_cfg)
    cfg = model.cfg
    values, times, pads = stack_windows(dataset)
    if values.shape[1:] != (cfg.input_length, cfg.input_dim):
        raise ValueError(f"windows are {values.shape[1:]}, model expects "
                         f"{(cfg.input_length, cfg.input_dim)}")
    g_mu, g_sigma = global_stats(dataset)
    model.global_mu.copy_(torch.as_tensor(g_mu, dtype=torch.float32))
    model.global_sigma.copy_(torch.as_tensor(g_sigma, dtype=torch.float32))

    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    ckpt_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None
    ckpt_path = ckpt_dir / "checkpoint.pt" if ckpt_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    T_all = torch.as_tensor(times, dtype=torch.float32)
    pad_all = torch.as_tensor(pads)
    C_all = torch.as_tensor(values, dtype=torch.float32)
    history: list[dict] = []
    N = len(dataset)
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        ratio = sample_ratio(rng)
        inputs, masks, mus, sigmas = prepare_epoch(values, pads, ratio, rng, (g_mu, g_sigma))
        X_all = torch.as_tensor(inputs, dtype=torch.float32)
        M_all = torch.as_tensor(masks)
        mu_all = torch.as_tensor(mus, dtype=torch.float32)
        sd_all = torch.as_tensor(sigmas, dtype=torch.float32)
        order = rng.permutation(N)
        sums: dict[str, float] = {}
        model.train()
        for start in range(0, N, train_cfg.batch):
            idx = torch.as_tensor(order[start:start + train_cfg.batch])
            C, T, P, M = C_all[idx], T_all[idx], pad_all[idx], M_all[idx]
            C_hat = model(X_all[idx], T, P, StandardStats(mu_all[idx], sd_all[idx]))
            if cfg.no_discriminator:
                real_logits = fake_logits = None
            else:
                real_logits = model.discriminate(C, T, P)
                fake_logits = model.discriminate(C_hat, T, P)
            losses = mixed_loss(C, C_hat, P, M, real_logits, fake_logits, cfg)
            if not torch.isfinite(losses.total):
                if ckpt_path is not None and history:
                    log.error("non-finite loss at epoch %d; keeping %s", epoch, ckpt_path)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            losses.total.backward()
            opt.step()
            for k, v in losses.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        row = {"epoch": epoch, "ratio": ratio}
        row.update({k: v / N for k, v in sums.items()})
        row["seconds"] = time.perf_counter() - t0
        history.append(row)
        log.info("epoch %d ratio %.3f L1m %.4f total %.4f (%.1fs)", epoch, ratio, row["L1m"],
                 row["total"], row["seconds"])
        if ckpt_dir:
            save_checkpoint(model, ckpt_path, {"epoch": epoch, "seed": train_cfg.seed,
                                               "train_config": asdict(train_cfg),
                                               "num_windows": N})
            _write_log(ckpt_dir / "train_log.csv", history)
    model.eval()
    return PretrainResult(model, history, ckpt_path)


def _trunk_states(model: CSIBERT, values, times, pads, batch: int = 256) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for s in range(0, len(values), batch):
            v = torch.as_tensor(values[s:s + batch], dtype=torch.float32)
            t = torch.as_tensor(times[s:s + batch], dtype=torch.float32)
            p = torch.as_tensor(pads[s:s + batch])
            stats = model.stats_for(v, ~p)
            out.append(model.encode(model.embed(model.standardize_with(v, stats), t), p))
    return torch.cat(out)


def finetune(dataset: Sequence[CsiSequence], labels, checkpoint, train_cfg: TrainConfig,
             num_classes: int | None = None) -> PretrainResult:
    """Train the attention-pooling classifier on top of a frozen trunk.

    ``checkpoint`` is a path or a :class:`CSIBERT`. Only the pooling layer and
    the final linear layer receive gradients; the trunk is run once in eval
    mode and its outputs reused.
    """
    model = load_checkpoint(checkpoint)[0] if not isinstance(checkpoint, CSIBERT) else checkpoint
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(dataset):
        raise ValueError("one label per window is required")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    torch.set_num_threads(train_cfg.num_threads)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model.set_num_classes(num_classes)
    for p in model.trunk_parameters():
        p.requires_grad_(False)
    model.eval()
    values, times, pads = stack_windows(dataset)
    states = _trunk_states(model, values, times, pads)
    P = torch.as_tensor(pads)
    y = torch.as_tensor(labels)
    head = list(model.pool.parameters()) + list(model.classifier.parameters())
    opt = torch.optim.Adam(head, lr=train_cfg.lr)
    history = []
    N = len(dataset)
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(N)
        total, correct = 0.0, 0
        for s in range(0, N, train_cfg.batch):
            idx = torch.as_tensor(order[s:s + train_cfg.batch])
            logits = model.classify_head(states[idx], P[idx])
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(dim=1) == y[idx]).sum())
        history.append({"epoch": epoch, "loss": total / N, "accuracy": correct / N})
    ckpt_path = None
    if train_cfg.checkpoint_dir:
        ckpt_path = save_checkpoint(model, Path(train_cfg.checkpoint_dir) / "finetuned.pt",
                                    {"seed": train_cfg.seed, "num_classes": num_classes,
                                     "train_config": asdict(train_cfg), "history": history})
    return PretrainResult(model, history, ckpt_path)


def predict_classes(model: CSIBERT, dataset: Sequence[CsiSequence]) -> np.ndarray:
    values, times, pads = stack_windows(dataset)
    model.eval()
    states = _trunk_states(model, values, times, pads)
    with torch.no_grad():
        logits = model.classify_head(states, torch.as_tensor(pads))
    return logits.argmax(dim=1).numpy()
