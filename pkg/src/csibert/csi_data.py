"""CSI sequences on a fixed slot grid: ingestion, windowing, synthesis and packet loss.

A capture is stored as one row per received packet. Lost packets are simply
absent from the file; after snapping rows to the nominal sampling grid the
empty slots become *pad* slots. Pad slots carry a zero value vector and a
nominal timestamp, and only ``pad_mask`` says whether a slot holds data.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

PAD_VALUE = 0.0
LOSS_MODELS = ("iid", "bursty")


class CsvFormatError(ValueError):
    """Raised when a CSI csv file cannot be parsed."""


class CsiFrame(NamedTuple):
    timestamp: float
    values: np.ndarray


@dataclass
class CsiSequence:
    """A window of CSI frames on a fixed-rate slot grid.

    Parameters
    ----------
    timestamps : ndarray, shape (n,)
        Milliseconds since capture start. Pad slots hold the nominal slot
        start time.
    values : ndarray, shape (n, d)
        Per-slot CSI vectors. Pad rows are forced to ``PAD_VALUE``.
    pad_mask : ndarray of bool, shape (n,)
        True where no packet was received.
    rate_hz : float
        Nominal sampling rate.
    labels : ndarray of int, shape (n,), optional
        Per-slot class labels (-1 on pads), when the source carries them.
    """

    timestamps: np.ndarray
    values: np.ndarray
    pad_mask: np.ndarray
    rate_hz: float = 100.0
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.array(self.values, dtype=np.float64, copy=True)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool).copy()
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-D (n, d) array")
        n = self.values.shape[0]
        if self.timestamps.shape != (n,) or self.pad_mask.shape != (n,):
            raise ValueError("timestamps, values and pad_mask must share length n")
        if not np.all(np.isfinite(self.timestamps)) or np.any(self.timestamps < 0):
            raise ValueError("timestamps must be finite and non-negative")
        observed_t = self.timestamps[~self.pad_mask]
        if np.any(np.diff(observed_t) <= 0):
            raise ValueError("timestamps must be strictly increasing on observed slots")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).copy()
            if self.labels.shape != (n,):
                raise ValueError("labels must have length n")
            self.labels[self.pad_mask] = -1
        self.values[self.pad_mask] = PAD_VALUE

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return ~self.pad_mask

    @property
    def loss_rate(self) -> float:
        return float(self.pad_mask.mean()) if self.n else 0.0

    @property
    def label(self) -> int | None:
        """Majority label over observed slots, or None when unlabeled."""
        if self.labels is None:
            return None
        lab = self.labels[self.labels >= 0]
        if lab.size == 0:
            return None
        return int(np.bincount(lab).argmax())

    def frames(self) -> Iterator[CsiFrame]:
        for i in np.flatnonzero(~self.pad_mask):
            yield CsiFrame(float(self.timestamps[i]), self.values[i])

    def replace(self, **changes) -> "CsiSequence":
        kw = dict(timestamps=self.timestamps, values=self.values, pad_mask=self.pad_mask,
                  rate_hz=self.rate_hz, labels=self.labels)
        kw.update(changes)
        return CsiSequence(**kw)


@dataclass
class SynthConfig:
    """Synthetic capture settings. ``num_classes`` > 0 adds a gesture signature per window."""

    d: int = 52
    n: int = 100
    rate_hz: float = 100.0
    num_sequences: int = 500
    loss_rate_mean: float = 0.1451
    loss_model: str = "iid"
    burst_mean_len: float = 3.0
    noise_std: float = 1.5
    seed: int = 0
    num_classes: int = 0
    num_latent: int = 3
    max_freq_hz: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.loss_rate_mean <= 1.0:
            raise ValueError("loss_rate_mean must lie in [0, 1]")
        if self.n <= 0 or self.d <= 0 or self.num_sequences <= 0:
            raise ValueError("n, d and num_sequences must be positive")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if self.loss_model not in LOSS_MODELS:
            raise ValueError(f"loss_model must be one of {LOSS_MODELS}")
        if self.burst_mean_len < 1:
            raise ValueError("burst_mean_len must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def slot_period_ms(rate_hz: float) -> float:
    return 1000.0 / rate_hz


def load_csv(path, rate_hz: float = 100.0, n_slots: int | None = None,
             window_length: int | None = None) -> list[CsiSequence]:
    """Read a capture csv and snap its rows onto the slot grid.

    The header must be ``timestamp_ms,<value columns...>[,label][,provenance]``;
    a provenance column is ignored. Slot ``k``
    covers ``[k, k+1) * 1000 / rate_hz`` milliseconds. Slots without a row
    become pad slots.

    Parameters
    ----------
    path : path-like
    rate_hz : float
        Nominal sampling rate of the capture.
    n_slots : int, optional
        Total number of slots. Defaults to the last occupied slot + 1, which
        cannot see losses at the tail of the capture.
    window_length : int, optional
        When given, the capture is cut with :func:`window`; otherwise the whole
        file is returned as a single sequence.

    Returns
    -------
    list of CsiSequence
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if not header or header[0] != "timestamp_ms":
            raise CsvFormatError(f"{path}: first column must be 'timestamp_ms'")
        # recovered files carry a trailing provenance column; it is not data
        has_prov = header[-1] == "provenance"
        body = header[:-1] if has_prov else header
        has_label = body[-1] == "label"
        value_cols = body[1:-1] if has_label else body[1:]
        if not value_cols:
            raise CsvFormatError(f"{path}: no value columns")
        width = len(header)
        times, rows, labs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise CsvFormatError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
            try:
                t = float(row[0])
                vals = [float(x) for x in row[1:1 + len(value_cols)]]
                lab = int(row[len(body) - 1]) if has_label else -1
            except ValueError:
                raise CsvFormatError(f"{path}: row {lineno} is not numeric") from None
            if not np.isfinite(t) or t < 0 or not np.all(np.isfinite(vals)):
                raise CsvFormatError(f"{path}: row {lineno} has a non-finite or negative value")
            times.append(t)
            rows.append(vals)
            labs.append(lab)

    d = len(value_cols)
    times = np.asarray(times, dtype=np.float64)
    slots = np.floor(times / slot_period_ms(rate_hz)).astype(np.int64)
    if n_slots is None:
        n_slots = int(slots.max()) + 1 if slots.size else 0
    if slots.size and slots.max() >= n_slots:
        raise CsvFormatError(f"{path}: timestamps extend past n_slots={n_slots}")

    period = slot_period_ms(rate_hz)
    ts = np.arange(n_slots, dtype=np.float64) * period
    values = np.zeros((n_slots, d))
    pad = np.ones(n_slots, dtype=bool)
    labels = np.full(n_slots, -1, dtype=np.int64)
    order = np.argsort(times, kind="stable")
    duplicates = 0
    for i in order:
        k = slots[i]
        if not pad[k]:
            duplicates += 1
            continue
        pad[k] = False
        ts[k] = times[i]
        values[k] = rows[i]
        labels[k] = labs[i]
    if duplicates:
        warnings.warn(f"{path}: {duplicates} rows fell into an occupied slot; kept the first",
                      stacklevel=2)

    seq = CsiSequence(ts, values, pad, rate_hz, labels if has_label else None)
    if window_length is not None:
        return window(seq, window_length)
    return [seq]


def write_csv(seqs: CsiSequence | Sequence[CsiSequence], path, include_pads: bool = False,
              provenance: Sequence[np.ndarray] | None = None, value_prefix: str = "sc") -> None:
    """Write sequences in the capture schema.

    Pad slots are omitted unless ``include_pads`` is set. ``provenance`` adds a
    per-slot column (one array per sequence) and implies ``include_pads``.
    """
    if isinstance(seqs, CsiSequence):
        seqs = [seqs]
    if provenance is not None:
        include_pads = True
    d = seqs[0].dim
    has_label = any(s.labels is not None for s in seqs)
    header = ["timestamp_ms"] + [f"{value_prefix}_{j}" for j in range(d)]
    if has_label:
        header.append("label")
    if provenance is not None:
        header.append("provenance")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for si, s in enumerate(seqs):
            for i in range(s.n):
                if s.pad_mask[i] and not include_pads:
                    continue
                row = [repr(float(s.timestamps[i]))] + [repr(float(v)) for v in s.values[i]]
                if has_label:
                    row.append(int(s.labels[i]) if s.labels is not None else -1)
                if provenance is not None:
                    row.append(str(provenance[si][i]))
                w.writerow(row)


def window(seq: CsiSequence, length: int) -> list[CsiSequence]:
    """Cut ``seq`` into non-overlapping windows of ``length`` slots, dropping the tail."""
    if length <= 0:
        raise ValueError("window length must be positive")
    out = []
    for start in range(0, seq.n - length + 1, length):
        sl = slice(start, start + length)
        out.append(CsiSequence(seq.timestamps[sl], seq.values[sl], seq.pad_mask[sl], seq.rate_hz,
                               None if seq.labels is None else seq.labels[sl]))
    return out


def concatenate(seqs: Sequence[CsiSequence]) -> CsiSequence:
    """Join consecutive windows back into one capture (inverse of :func:`window`)."""
    labels = None
    if all(s.labels is not None for s in seqs):
        labels = np.concatenate([s.labels for s in seqs])
    return CsiSequence(np.concatenate([s.timestamps for s in seqs]),
                       np.concatenate([s.values for s in seqs]),
                       np.concatenate([s.pad_mask for s in seqs]),
                       seqs[0].rate_hz, labels)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5 + 1e-9))


def _bursty_positions(candidates: np.ndarray, count: int, mean_len: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Pick ``count`` candidate indices in runs of geometric length."""
    chosen = np.zeros(candidates.size, dtype=bool)
    p = 1.0 / mean_len
    while chosen.sum() < count:
        free = np.flatnonzero(~chosen)
        start = rng.choice(free)
        run = int(rng.geometric(p))
        run = min(run, count - int(chosen.sum()))
        # runs follow consecutive candidates and stop at one already taken
        stop = start
        while stop < candidates.size and stop - start < run and not chosen[stop]:
            chosen[stop] = True
            stop += 1
    return candidates[chosen]


def simulate_loss(seq: CsiSequence, rate: float, model: str = "iid", seed: int = 0,
                  burst_mean_len: float = 3.0) -> CsiSequence:
    """Mark ``round(rate * #observed)`` extra observed slots as lost.

    The input sequence is left untouched and serves as ground truth.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("loss rate must satisfy 0 <= rate < 1")
    if model not in LOSS_MODELS:
        raise ValueError(f"loss model must be one of {LOSS_MODELS}")
    rng = np.random.default_rng(seed)
    candidates = np.flatnonzero(~seq.pad_mask)
    count = _round_half_up(rate * candidates.size)
    if count == 0:
        return seq.replace()
    if model == "iid":
        lost = rng.choice(candidates, size=count, replace=False)
    else:
        lost = _bursty_positions(candidates, count, burst_mean_len, rng)
    pad = seq.pad_mask.copy()
    pad[lost] = True
    return seq.replace(pad_mask=pad, timestamps=_nominal_on_pads(seq.timestamps, pad, seq.rate_hz))


def _nominal_on_pads(timestamps: np.ndarray, pad: np.ndarray, rate_hz: float) -> np.ndarray:
    period = slot_period_ms(rate_hz)
    ts = timestamps.copy()
    ts[pad] = np.floor(ts[pad] / period) * period
    return ts


def _subcarrier_profile(d: int, rng: np.random.Generator) -> np.ndarray:
    # frequency-selective fading shape across subcarriers, amplitude ~ 10..30
    x = np.linspace(0, 1, d)
    profile = 20 + 6 * np.cos(2 * np.pi * (1.3 * x + rng.uniform()))
    return profile + 3 * np.cos(2 * np.pi * (3.7 * x + rng.uniform()))


def synth_generate(cfg: SynthConfig) -> list[tuple[CsiSequence, CsiSequence]]:
    """Generate (ground truth, lossy) window pairs.

    Each window is a static per-subcarrier profile plus ``num_latent`` slow
    latent motions (sums of sinusoids) mixed across subcarriers by a shared
    low-rank loading matrix, plus white noise. With ``num_classes > 0`` each
    window also carries a class-specific transient (a Gaussian burst at a
    class-dependent time with a class-dependent subcarrier pattern). Windows
    are laid end to end on one slot grid so they can be written as a single
    capture and re-windowed exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    d, n, K = cfg.d, cfg.n, cfg.num_latent
    period = slot_period_ms(cfg.rate_hz)
    profile = _subcarrier_profile(d, rng)
    x = np.linspace(0, 1, d)
    loadings = np.stack([np.cos(2 * np.pi * (rng.uniform(0.3, 1.5) * x + rng.uniform()))
                         for _ in range(K)], axis=1) * rng.uniform(2.0, 4.0, size=K)
    class_patterns = np.stack([np.cos(2 * np.pi * ((c + 1) * 0.7 * x + 0.25 * c))
                               for c in range(max(cfg.num_classes, 1))])
    class_centres = (np.arange(max(cfg.num_classes, 1)) + 0.5) / max(cfg.num_classes, 1)
    seed_seq = np.random.SeedSequence(cfg.seed)
    loss_seeds = seed_seq.spawn(cfg.num_sequences)

    pairs = []
    for i in range(cfg.num_sequences):
        slots = np.arange(n) + i * n
        t_ms = (slots + rng.uniform(0, 0.5, size=n)) * period
        t = (t_ms - t_ms[0]) / 1000.0
        latent = np.zeros((n, K))
        for k in range(K):
            for _ in range(2):
                f = rng.uniform(0.2, cfg.max_freq_hz)
                latent[:, k] += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        vals = profile + latent @ loadings.T
        labels = None
        if cfg.num_classes > 0:
            c = int(rng.integers(cfg.num_classes))
            env = np.exp(-0.5 * ((np.arange(n) / n - class_centres[c]) / 0.08) ** 2)
            vals = vals + 4.0 * env[:, None] * class_patterns[c][None, :]
            labels = np.full(n, c)
        vals = vals + cfg.noise_std * rng.standard_normal((n, d))
        truth = CsiSequence(t_ms, vals, np.zeros(n, dtype=bool), cfg.rate_hz, labels)
        if cfg.loss_rate_mean >= 1.0:
            all_pad = np.ones(n, dtype=bool)
            lossy = truth.replace(pad_mask=all_pad,
                                  timestamps=_nominal_on_pads(t_ms, all_pad, cfg.rate_hz))
        else:
            lossy = simulate_loss(truth, cfg.loss_rate_mean, cfg.loss_model,
                                  int(loss_seeds[i].generate_state(1)[0]), cfg.burst_mean_len)
        pairs.append((truth, lossy))
    return pairs


def loss_stats(seqs: Sequence[CsiSequence]) -> dict[str, float]:
    """Mean, max and min per-window loss rate."""
    if len(seqs) == 0:
        return {"mean": 0.0, "max": 0.0, "min": 0.0}
    rates = np.array([s.loss_rate for s in seqs])
    return {"mean": float(rates.mean()), "max": float(rates.max()), "min": float(rates.min())}


@dataclass
class Dataset:
    """A windowed capture as described by a manifest file."""

    lossy: list[CsiSequence]
    truth: list[CsiSequence] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray | None:
        labs = [s.label for s in self.lossy]
        if any(lab is None for lab in labs):
            return None
        return np.asarray(labs, dtype=np.int64)


def write_dataset(pairs: Sequence[tuple[CsiSequence, CsiSequence]], out_dir, meta: dict | None = None) -> Path:
    """Write ``lossy.csv``, ``truth.csv`` and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = [p[0] for p in pairs]
    lossy = [p[1] for p in pairs]
    write_csv(lossy, out / "lossy.csv")
    write_csv(truth, out / "truth.csv")
    first = lossy[0]
    labels = [s.label for s in lossy]
    manifest = {
        "files": [{"path": "lossy.csv", "role": "lossy"}, {"path": "truth.csv", "role": "truth"}],
        "d": first.dim,
        "rate_hz": first.rate_hz,
        "window_length": first.n,
        "n_slots": first.n * len(lossy),
        "labels": None if any(lab is None for lab in labels) else labels,
        "loss": loss_stats(lossy),
    }
    if meta:
        manifest.update(meta)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> Dataset:
    """Load the windows listed in a manifest written by :func:`write_dataset`."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    meta = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    by_role = {f["role"]: root / f["path"] for f in meta["files"]}
    kw = dict(rate_hz=meta["rate_hz"], n_slots=meta.get("n_slots"), window_length=meta["window_length"])
    lossy = load_csv(by_role["lossy"], **kw)
    truth = load_csv(by_role["truth"], **kw) if "truth" in by_role else None
    for s in lossy:
        if s.dim != meta["d"]:
            raise CsvFormatError(f"{by_role['lossy']}: dimension {s.dim} != manifest d={meta['d']}")
    return Dataset(lossy, truth, meta)
