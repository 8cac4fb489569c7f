"""Command-line entry point.

Every subcommand reads an optional JSON config of flat dotted keys
(``"train.epochs": 30``), applies ``--set key=value`` and dedicated flags on
top, validates the result, and only then starts work. Each output directory
receives ``config.json`` (the effective config) and ``run.json`` (seed, input
hashes, outputs, wall time).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import types
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .csi_data import SynthConfig, load_dataset, synth_generate, write_csv, write_dataset
from .model import ModelConfig, load_checkpoint
from .training import TrainConfig, finetune, pretrain, predict_classes

log = logging.getLogger("csibert")


class ConfigError(ValueError):
    pass


@dataclass
class ProtocolConfig:
    delete_rate: float = 0.15
    rates: str = "0.1:0.6:0.1"
    methods: str = "csibert,linear,kriging,idw"
    seed: int = 0
    draws: int = 1
    mode: str = "recover"
    probe_epochs: int = 60
    train_fraction: float = 0.7
    kriging_model: str = "exponential"
    idw_power: float = 2.0
    idw_k: int = 8

    def __post_init__(self):
        if not 0 < self.delete_rate < 1:
            raise ConfigError("protocol.delete_rate must lie in (0, 1)")
        if self.mode not in ("recover", "replace"):
            raise ConfigError("protocol.mode must be 'recover' or 'replace'")
        if self.draws < 1:
            raise ConfigError("protocol.draws must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("protocol.train_fraction must lie in (0, 1)")

    @property
    def method_list(self) -> list[str]:
        return [m.strip() for m in self.methods.split(",") if m.strip()]


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig,
            "protocol": ProtocolConfig}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    synth: SynthConfig
    protocol: ProtocolConfig

    def flat(self) -> dict:
        out = {}
        for name in SECTIONS:
            for k, v in asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = list(v) if isinstance(v, tuple) else v
        return out


def _coerce(cls, key: str, value):
    hints = typing.get_type_hints(cls)
    name = key.split(".", 1)[1]
    typ = hints[name]
    origin = typing.get_origin(typ)
    args = [a for a in typing.get_args(typ) if a is not type(None)]
    if value is None:
        if type(None) in typing.get_args(typ):
            return None
        raise ConfigError(f"{key} may not be null")
    if origin in (typing.Union, types.UnionType):
        typ = args[0]
        origin = typing.get_origin(typ)
    try:
        if origin is tuple:
            return tuple(float(x) for x in value)
        if typ is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} as {getattr(typ, '__name__', typ)}") from None


def build_config(flat: dict) -> RunConfig:
    """Validate flat dotted keys and build every section."""
    per_section: dict[str, dict] = {name: {} for name in SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        cls = SECTIONS.get(section)
        if cls is None or name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown config key {key!r}")
        per_section[section][name] = _coerce(cls, key, value)
    try:
        built = {name: SECTIONS[name](**kw) for name, kw in per_section.items()}
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(**built)


def _parse_set(item: str) -> tuple[str, object]:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(args, overrides: dict) -> RunConfig:
    flat: dict = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
        if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
            raise ConfigError("config file must be a flat JSON object of dotted keys")
        flat.update(data)
    for item in args.set or []:
        k, v = _parse_set(item)
        flat[k] = v
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(flat)


# -- artifacts --------------------------------------------------------------

def git_hash(path) -> str:
    """Content hash in git's blob format."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _input_files(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    files = [path]
    if path.name == "manifest.json":
        meta = json.loads(path.read_text())
        files += [path.parent / f["path"] for f in meta.get("files", [])]
    elif path.suffix == ".pt":
        sidecar = path.with_suffix(path.suffix + ".json")
        if sidecar.exists():
            files.append(sidecar)
    return files


class Run:
    """Bookkeeping for one command: writes config.json and run.json."""

    def __init__(self, command: str, out: Path, cfg: RunConfig, seed: int, inputs=()):
        self.command = command
        self.out = Path(out)
        self.cfg = cfg
        self.seed = seed
        self.inputs = {}
        for p in inputs:
            if p is None:
                continue
            for f in _input_files(p):
                if not f.exists():
                    raise FileNotFoundError(f"input not found: {f}")
                self.inputs[str(f)] = git_hash(f)
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.t0 = time.perf_counter()
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(json.dumps(cfg.flat(), indent=2, sort_keys=True) + "\n")

    def add(self, *paths) -> None:
        self.outputs += [str(p) for p in paths]

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "config": self.cfg.flat(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time_s": time.perf_counter() - self.t0,
            **self.extra,
        }
        (self.out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _checked(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# -- commands ---------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> None:
    run = Run("synth", args.out, cfg, cfg.synth.seed)
    pairs = synth_generate(cfg.synth)
    manifest = write_dataset(pairs, run.out, {"synth": asdict(cfg.synth)})
    run.add(manifest, run.out / "lossy.csv", run.out / "truth.csv")
    run.finish()


def cmd_pretrain(args, cfg: RunConfig) -> None:
    from .plotting import plot_training

    data = load_dataset(_checked(args.data, "dataset"))
    first = data.lossy[0]
    model_cfg = ModelConfig(**{**asdict(cfg.model), "input_length": first.n, "input_dim": first.dim})
    cfg.model = model_cfg
    cfg.train.checkpoint_dir = str(args.out)
    run = Run("pretrain", args.out, cfg, cfg.train.seed, [args.data])
    res = pretrain(data.lossy, model_cfg, cfg.train)
    run.add(res.checkpoint, run.out / "train_log.csv",
            plot_training(res.history, run.out / "training.png"))
    first_l1m, last_l1m = res.history[0]["L1m"], res.history[-1]["L1m"]
    run.extra["L1m"] = {"first_epoch": first_l1m, "last_epoch": last_l1m}
    run.finish()


def cmd_finetune(args, cfg: RunConfig) -> None:
    data = load_dataset(_checked(args.data, "dataset"))
    if data.labels is None:
        raise ValueError("finetuning needs a labelled dataset")
    cfg.train.checkpoint_dir = str(args.out)
    run = Run("finetune", args.out, cfg, cfg.train.seed, [args.data, args.checkpoint])
    res = finetune(data.lossy, data.labels, _checked(args.checkpoint, "checkpoint"), cfg.train)
    acc = float((predict_classes(res.model, data.lossy) == data.labels).mean())
    run.extra["train_accuracy"] = acc
    run.add(res.checkpoint)
    run.finish()


def cmd_recover(args, cfg: RunConfig) -> None:
    from .recovery import recover_many

    data = load_dataset(_checked(args.data, "dataset"))
    model, _ = load_checkpoint(_checked(args.checkpoint, "checkpoint"))
    p = cfg.protocol
    run = Run("recover", args.out, cfg, p.seed, [args.data, args.checkpoint])
    results = recover_many(data.lossy, model, p.mode, p.seed, p.draws)
    seqs = [r.to_sequence(s) for r, s in zip(results, data.lossy)]
    path = run.out / "recovered.csv"
    write_csv(seqs, path, provenance=[r.provenance for r in results])
    run.add(path)
    run.finish()


def _methods(cfg: RunConfig, checkpoint):
    from .baselines import VariogramConfig
    from .metrics import build_methods

    p = cfg.protocol
    names = p.method_list
    model = None
    if "csibert" in names:
        if checkpoint is None:
            raise ValueError("method 'csibert' needs --checkpoint")
        model, _ = load_checkpoint(_checked(checkpoint, "checkpoint"))
    params = {"kriging": {"variogram": VariogramConfig(model=p.kriging_model)},
              "idw": {"power": p.idw_power, "k": p.idw_k}}
    return build_methods(names, model, p.seed, params)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    from .metrics import run_protocol

    data = load_dataset(_checked(args.data, "dataset"))
    p = cfg.protocol
    methods = _methods(cfg, args.checkpoint)
    run = Run("evaluate", args.out, cfg, p.seed, [args.data, args.checkpoint])
    dataset_id = run.inputs[str(_input_files(args.data)[0])]
    report = run_protocol(data.lossy, methods, p.delete_rate, p.seed, data.truth, dataset_id)
    path = run.out / "report.json"
    report.write(path)
    run.add(path)
    run.finish()


def cmd_sweep(args, cfg: RunConfig) -> None:
    from .metrics import parse_rates, sweep, write_sweep_csv
    from .plotting import plot_sweep

    data = load_dataset(_checked(args.data, "dataset"))
    p = cfg.protocol
    rates = parse_rates(p.rates)
    methods = _methods(cfg, args.checkpoint)
    run = Run("sweep", args.out, cfg, p.seed, [args.data, args.checkpoint])
    rows = sweep(data.lossy, methods, rates, p.seed, data.truth)
    path = run.out / "sweep.csv"
    write_sweep_csv(rows, path)
    run.add(path, *plot_sweep(rows, run.out))
    run.finish()


def cmd_probe(args, cfg: RunConfig) -> None:
    from .baselines import fill_sequence
    from .metrics import downstream_probe, zero_filled
    from .recovery import combine, predict

    data = load_dataset(_checked(args.data, "dataset"))
    if data.labels is None:
        raise ValueError("the probe needs a labelled dataset")
    model, _ = load_checkpoint(_checked(args.checkpoint, "checkpoint"))
    p = cfg.protocol
    run = Run("probe", args.out, cfg, p.seed, [args.data, args.checkpoint])
    c_hat = predict(model, data.lossy, p.seed, p.draws)
    variants = {
        "zero_filled": zero_filled(data.lossy),
        "linear": np.stack([fill_sequence(s, "linear").sequence for s in data.lossy]),
        "recover": np.stack([combine(s, c, "recover").sequence for s, c in zip(data.lossy, c_hat)]),
        "replace": np.stack([combine(s, c, "replace").sequence for s, c in zip(data.lossy, c_hat)]),
    }
    acc = downstream_probe(variants, data.labels, p.seed, p.train_fraction, p.probe_epochs)
    control = downstream_probe({"zero_filled": variants["zero_filled"]}, data.labels, p.seed,
                               p.train_fraction, p.probe_epochs, shuffle_labels=True)
    out = {"accuracy": acc, "shuffled_label_control": control["zero_filled"],
           "num_windows": len(data.lossy), "seed": p.seed}
    path = run.out / "probe.json"
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    run.add(path)
    run.finish()


# -- parser -----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data=True, checkpoint=False) -> None:
    p.add_argument("--config", help="JSON file of flat dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    if data:
        p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    if checkpoint:
        p.add_argument("--checkpoint", required=checkpoint == "required", help="checkpoint .pt file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csibert", description="CSI recovery with a masked transformer")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p, data=False)
    p.add_argument("--loss", type=float, help="mean packet loss rate")
    p.add_argument("--num-sequences", type=int)
    p.add_argument("--classes", type=int, help="number of activity classes (0 = unlabelled)")
    p.add_argument("--loss-model", choices=["iid", "bursty"])

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _common(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("finetune", help="train the classification head on a frozen trunk")
    _common(p, checkpoint="required")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("recover", help="fill lost slots of a dataset")
    _common(p, checkpoint="required")
    p.add_argument("--mode", choices=["recover", "replace"])

    p = sub.add_parser("evaluate", help="deletion benchmark at one rate")
    _common(p, checkpoint=True)
    p.add_argument("--methods", help="comma-separated: csibert,linear,kriging,idw")
    p.add_argument("--delete-rate", type=float)

    p = sub.add_parser("sweep", help="deletion benchmark over several rates")
    _common(p, checkpoint=True)
    p.add_argument("--methods")
    p.add_argument("--rates", help="start:stop:step (inclusive) or a comma list")

    p = sub.add_parser("probe", help="downstream accuracy on recovered vs zero-filled data")
    _common(p, checkpoint="required")
    p.add_argument("--epochs", type=int, help="probe training epochs")
    return parser


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "recover": cmd_recover, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "probe": cmd_probe}


def _overrides(args) -> dict:
    cmd = args.command
    o = {}
    seed_key = {"synth": "synth.seed", "pretrain": "train.seed", "finetune": "train.seed"}.get(
        cmd, "protocol.seed")
    o[seed_key] = args.seed
    g = lambda name: getattr(args, name, None)  # noqa: E731
    o["synth.loss_rate_mean"] = g("loss")
    o["synth.num_sequences"] = g("num_sequences")
    o["synth.num_classes"] = g("classes")
    o["synth.loss_model"] = g("loss_model")
    o["protocol.mode"] = g("mode")
    o["protocol.methods"] = g("methods")
    o["protocol.delete_rate"] = g("delete_rate")
    o["protocol.rates"] = g("rates")
    if cmd == "probe":
        o["protocol.probe_epochs"] = g("epochs")
    else:
        o["train.epochs"] = g("epochs")
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args, _overrides(args))
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # every failure becomes one structured line on stderr
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
