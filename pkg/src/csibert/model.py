"""Bidirectional transformer for CSI windows with reconstruction, adversarial and class heads.

Input windows are standardized per dimension, projected to the hidden width,
summed with a sinusoidal embedding of the normalized timestamps and a learned
position embedding, and passed through a post-norm transformer encoder. Three
heads sit on the shared trunk:

* the recoverer maps every slot back to CSI space and undoes the
  standardization,
* the discriminator pools a (real or generated) window and, behind a gradient
  reversal layer, predicts whether it was generated,
* the classifier pools over time with attention and predicts a class.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DESTANDARDIZE_MODES = ("inverse", "shift_then_scale")
BERT_VOCAB_SIZE = 30522
_NEG = -1e9


@dataclass
class ModelConfig:
    input_length: int = 100
    input_dim: int = 52
    num_layers: int = 4
    hidden: int = 64
    inner: int = 128
    heads: int = 4
    dropout: float = 0.1
    grl_lambda: float = 1.0
    loss_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    mask_loss_weight: float = 1.0
    eps_std: float = 1e-6
    destandardize_mode: str = "inverse"
    no_time_embedding: bool = False
    no_standardization: bool = False
    no_discriminator: bool = False
    num_classes: int = 0
    norm_first: bool = False
    # BERT's word-embedding table. Continuous input never indexes it; it is
    # kept so the parameter budget matches a stock BERT trunk. 0 drops it.
    vocab_size: int = BERT_VOCAB_SIZE

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 5:
            raise ValueError("loss_weights needs five entries")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if min(self.loss_weights) < 0 or self.mask_loss_weight < 0 or self.grl_lambda < 0:
            raise ValueError("loss weights and grl_lambda must be non-negative")
        if self.destandardize_mode not in DESTANDARDIZE_MODES:
            raise ValueError(f"destandardize_mode must be one of {DESTANDARDIZE_MODES}")
        if min(self.input_length, self.input_dim, self.num_layers, self.hidden, self.inner) <= 0:
            raise ValueError("sizes must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss_weights"] = list(self.loss_weights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class StandardStats(NamedTuple):
    mu: torch.Tensor
    sigma: torch.Tensor


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def masked_stats(values: torch.Tensor, observed: torch.Tensor) -> StandardStats:
    """Population mean and std over the slots where ``observed`` is true.

    ``values`` is ``(..., n, d)`` and ``observed`` is ``(..., n)``. Rows with
    no observed slot get mu = 0, sigma = 0.
    """
    w = observed.to(values.dtype).unsqueeze(-1)
    count = w.sum(dim=-2).clamp_min(1.0)
    mu = (values * w).sum(dim=-2) / count
    var = (((values - mu.unsqueeze(-2)) * w) ** 2).sum(dim=-2) / count
    return StandardStats(mu, var.clamp_min(0.0).sqrt())


def standardize(values, observed, eps_std: float = 1e-6):
    """Standardize each dimension with statistics taken over observed slots.

    Returns ``(Z, StandardStats)``; ``Z = (C - mu) / max(sigma, eps_std)``.
    Numpy input gives numpy output.
    """
    numpy_in = not isinstance(values, torch.Tensor)
    C = _as_tensor(values)
    obs = _as_tensor(observed, torch.bool)
    if not bool(obs.any(dim=-1).all()):
        raise ValueError("standardize needs at least one observed slot per window")
    stats = masked_stats(C, obs)
    Z = (C - stats.mu.unsqueeze(-2)) / stats.sigma.clamp_min(eps_std).unsqueeze(-2)
    if numpy_in:
        return Z.numpy(), StandardStats(stats.mu.numpy(), stats.sigma.numpy())
    return Z, stats


def destandardize(Y, stats: StandardStats, mode: str = "inverse"):
    """Map standardized outputs back to CSI scale.

    ``inverse`` computes ``y * sigma + mu``. ``shift_then_scale`` computes
    ``(y + mu) * sigma``, which is not an inverse of :func:`standardize` and
    exists for comparison runs only.
    """
    numpy_in = not isinstance(Y, torch.Tensor)
    Yt = _as_tensor(Y)
    mu = _as_tensor(stats.mu, Yt.dtype).unsqueeze(-2)
    sigma = _as_tensor(stats.sigma, Yt.dtype).unsqueeze(-2)
    if mode == "inverse":
        out = Yt * sigma + mu
    elif mode == "shift_then_scale":
        out = (Yt + mu) * sigma
    else:
        raise ValueError(f"unknown destandardize mode {mode!r}")
    return out.numpy() if numpy_in else out


def normalize_time(T: torch.Tensor) -> torch.Tensor:
    lo = T.min(dim=-1, keepdim=True).values
    hi = T.max(dim=-1, keepdim=True).values
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (T - lo) / safe, torch.zeros_like(T))


def time_embedding(T, dim: int):
    """Sinusoidal embedding of min-max normalized timestamps.

    Even component ``j`` is ``sin(norm / 10**(4j/dim))`` and odd component
    ``j`` is ``cos(norm / 10**(4(j-1)/dim))``. A window with a single distinct
    timestamp normalizes to 0 everywhere.
    """
    numpy_in = not isinstance(T, torch.Tensor)
    Tt = _as_tensor(T)
    norm = normalize_time(Tt).unsqueeze(-1)
    j = torch.arange(dim, dtype=Tt.dtype, device=Tt.device)
    even = (j - j.remainder(2))
    angle = norm / torch.pow(torch.tensor(10.0, dtype=Tt.dtype), 4 * even / dim)
    out = torch.where(j.remainder(2) == 0, torch.sin(angle), torch.cos(angle))
    return out.numpy() if numpy_in else out


def sinusoid_table(length: int, dim: int) -> torch.Tensor:
    """Fixed sin/cos position table; the starting point for the learned positions."""
    pos = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return table


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` backward."""
    return _GradReverse.apply(x, lam)


class GradientReversal(nn.Module):
    def __init__(self, lam: float = 1.0):
        super().__init__()
        self.lam = lam

    def forward(self, x):
        return grad_reverse(x, self.lam)


class SelfAttention(nn.Module):
    def __init__(self, hidden, heads, dropout):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(hidden, hidden)
        self.key = nn.Linear(hidden, hidden)
        self.value = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_bias):
        b, n, h = x.shape
        dh = h // self.heads
        q = self.query(x).view(b, n, self.heads, dh).transpose(1, 2)
        k = self.key(x).view(b, n, self.heads, dh).transpose(1, 2)
        v = self.value(x).view(b, n, self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh) + key_bias[:, None, None, :]
        attn = self.drop(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, h)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    """Post-norm BERT layer: attention and GELU feed-forward, each with residual + LayerNorm."""

    def __init__(self, hidden, inner, heads, dropout, norm_first=False):
        super().__init__()
        self.norm_first = norm_first
        self.attention = SelfAttention(hidden, heads, dropout)
        self.attn_norm = nn.LayerNorm(hidden, eps=1e-12)
        self.ff_in = nn.Linear(hidden, inner)
        self.ff_out = nn.Linear(inner, hidden)
        self.ff_norm = nn.LayerNorm(hidden, eps=1e-12)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_bias):
        if self.norm_first:
            x = x + self.drop(self.attention(self.attn_norm(x), key_bias))
            return x + self.drop(self._ff(self.ff_norm(x)))
        x = self.attn_norm(x + self.drop(self.attention(x, key_bias)))
        return self.ff_norm(x + self.drop(self._ff(x)))

    def _ff(self, x):
        return self.ff_out(F.gelu(self.ff_in(x)))


class AttentionPool(nn.Module):
    """Additive attention over time; pads get zero weight."""

    def __init__(self, hidden):
        super().__init__()
        self.proj = nn.Linear(hidden, hidden)
        self.score = nn.Linear(hidden, 1, bias=False)

    def forward(self, x, pad_mask):
        s = self.score(torch.tanh(self.proj(x))).squeeze(-1)
        s = s.masked_fill(pad_mask, _NEG)
        w = torch.softmax(s, dim=-1)
        return (w.unsqueeze(-1) * x).sum(dim=1)


def masked_mean(x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    w = (~pad_mask).to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)


class CSIBERT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.token_embedding = nn.Embedding(cfg.vocab_size, h) if cfg.vocab_size else None
        self.input_proj = nn.Linear(cfg.input_dim, h)
        self.position = nn.Embedding(cfg.input_length, h)
        self.embed_drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(h, cfg.inner, cfg.heads, cfg.dropout, cfg.norm_first) for _ in range(cfg.num_layers))
        self.recoverer = nn.Linear(h, cfg.input_dim)
        self.grl = GradientReversal(cfg.grl_lambda)
        self.discriminator = nn.Linear(h, 2)
        self.pool = AttentionPool(h)
        self.classifier = nn.Linear(h, cfg.num_classes) if cfg.num_classes else None
        # dataset-wide statistics, used when a window has no observed slot
        self.register_buffer("global_mu", torch.zeros(cfg.input_dim))
        self.register_buffer("global_sigma", torch.ones(cfg.input_dim))
        self.apply(self._init_weights)
        with torch.no_grad():
            self.position.weight.copy_(sinusoid_table(cfg.input_length, h))

    @staticmethod
    def _init_weights(module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, std=0.02)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)

    def set_num_classes(self, num_classes: int) -> None:
        if num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        self.cfg.num_classes = num_classes
        self.classifier = nn.Linear(self.cfg.hidden, num_classes)
        self._init_weights(self.classifier)
        self.classifier.to(self.input_proj.weight.device)

    def trunk_parameters(self):
        skip = {id(p) for m in (self.recoverer, self.discriminator, self.pool, self.classifier)
                if m is not None for p in m.parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    # -- stages -----------------------------------------------------------

    def stats_for(self, values, observed) -> StandardStats:
        stats = masked_stats(values, observed)
        empty = ~observed.any(dim=-1, keepdim=True)
        mu = torch.where(empty, self.global_mu.to(values.dtype), stats.mu)
        sigma = torch.where(empty, self.global_sigma.to(values.dtype), stats.sigma)
        return StandardStats(mu, sigma)

    def standardize_with(self, values, stats: StandardStats):
        if self.cfg.no_standardization:
            return values
        return (values - stats.mu.unsqueeze(1)) / stats.sigma.clamp_min(self.cfg.eps_std).unsqueeze(1)

    def embed(self, Z, T, pad_mask=None):
        """Linear projection + time embedding + position embedding (+ dropout)."""
        n = Z.shape[1]
        x = self.input_proj(Z)
        if not self.cfg.no_time_embedding:
            x = x + time_embedding(T.to(Z.dtype), self.cfg.hidden)
        x = x + self.position.weight[:n].unsqueeze(0)
        return self.embed_drop(x)

    def encode(self, state, pad_mask):
        key_bias = torch.zeros(pad_mask.shape, dtype=state.dtype, device=state.device)
        key_bias = key_bias.masked_fill(pad_mask, _NEG)
        for layer in self.layers:
            state = layer(state, key_bias)
        return state

    def recover_head(self, state, stats: StandardStats):
        y = self.recoverer(state)
        if self.cfg.no_standardization:
            return y
        return destandardize(y, stats, self.cfg.destandardize_mode)

    def discriminate(self, values, T, pad_mask):
        """Two-class logits (0 = real, 1 = generated) for complete or padded windows."""
        stats = self.stats_for(values, ~pad_mask)
        state = self.encode(self.embed(self.standardize_with(values, stats), T), pad_mask)
        pooled = self.grl(masked_mean(state, pad_mask))
        return self.discriminator(pooled)

    def classify_head(self, state, pad_mask):
        if self.classifier is None:
            raise ValueError("num_classes is not set; call set_num_classes first")
        return self.classifier(self.pool(state, pad_mask))

    # -- full passes ------------------------------------------------------

    def forward(self, values, T, pad_mask, stats: StandardStats | None = None):
        """Reconstruct every slot of a batch of windows.

        ``values`` has mask slots already materialized. ``stats`` defaults to
        statistics over the non-pad slots.
        """
        if stats is None:
            stats = self.stats_for(values, ~pad_mask)
        state = self.encode(self.embed(self.standardize_with(values, stats), T), pad_mask)
        return self.recover_head(state, stats)

    def classify(self, values, T, pad_mask):
        stats = self.stats_for(values, ~pad_mask)
        state = self.encode(self.embed(self.standardize_with(values, stats), T), pad_mask)
        return self.classify_head(state, pad_mask)


def count_parameters(model: nn.Module) -> dict[str, int]:
    """Parameter counts per top-level submodule plus ``total``."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        out[top] = out.get(top, 0) + p.numel()
    out["total"] = sum(out.values())
    return out


def save_checkpoint(model: CSIBERT, path, meta: dict | None = None) -> Path:
    """Write ``<path>`` (torch state dict) and ``<path>.json`` (config + metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {"model_config": model.cfg.to_dict(), "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[CSIBERT, dict]:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    cfg = ModelConfig.from_dict(sidecar["model_config"])
    model = CSIBERT(cfg)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model, sidecar.get("meta", {})

