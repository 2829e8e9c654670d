"""Command-line entry point: ``pulsemag <command> [--config run.json] [overrides]``.

Configuration precedence is defaults < config file < command-line overrides.
Every run writes into ``<runs_dir>/<name>/`` (resolved_config.json, config_hash,
versions.json, checkpoints/, reports/, plots/, frames/) guarded by a lock file.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 missing encoder.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, EncoderNotFoundError, PulseMagError

log = logging.getLogger("pulsemag")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_ENCODER = 0, 1, 2, 3

COMMANDS = ("synth", "compress", "train-stage1", "train-stage2", "train-e2e", "eval", "sweep",
            "ablate-loss", "compare", "visualize")

_TRAIN_SKIP = {"grid", "seed", "deterministic", "tdm", "psmn"}


def _defaults() -> dict:
    from .data import SynthConfig
    from .training import TrainConfig

    synth = json.loads(json.dumps(SynthConfig().to_dict()))
    synth.pop("seed")
    train = {k: v for k, v in json.loads(json.dumps(TrainConfig().to_dict())).items() if k not in _TRAIN_SKIP}
    return {
        "name": "default",
        "runs_dir": "runs",
        "seed": 0,
        "deterministic": True,
        "grid": {"lo": 0.66, "hi": 3.0, "bin_bpm": 1.0},
        "synth": {**synth, "n_train": 16, "n_val": 8},
        "train": train,
        "stage2_epochs": None,  # Stage II / end-to-end epochs; falls back to train.epochs
        "models": {"tdm": {}, "psmn": {}},
        "crf": 35,
        "crf_list": [0, 5, 10, 15, 20, 25],
        "data": {"train": None, "val": None},
        "checkpoints": {"theta": None, "psi": None},
        "eval": {"window": 300},
        "visualize": {"index": 0},
        "workers": 1,
    }


@dataclass
class RunConfig:
    doc: dict
    config_hash: str

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def run_dir(self) -> Path:
        return Path(self.doc["runs_dir"]) / self.doc["name"]

    def grid(self):
        from .signal import FrequencyGrid

        return FrequencyGrid(**self.doc["grid"])

    def synth(self):
        from .data import SynthConfig

        s = {k: v for k, v in self.doc["synth"].items() if k not in ("n_train", "n_val")}
        for k in ("channel_weights", "skin_color", "mask_center", "mask_axes", "hr_range"):
            s[k] = tuple(s[k])
        return SynthConfig(seed=self.doc["seed"], **s)

    def train(self, stage2: bool = False):
        from .training import TrainConfig

        t = dict(self.doc["train"])
        if stage2 and self.doc["stage2_epochs"] is not None:
            t["epochs"] = self.doc["stage2_epochs"]
        return TrainConfig(grid=self.grid(), seed=self.doc["seed"], deterministic=self.doc["deterministic"],
                           tdm=self.doc["models"]["tdm"], psmn=self.doc["models"]["psmn"], **t)


def _type_ok(default, value) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if path == "models.":  # architecture kwargs, validated by the model constructors
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            base[key] = {**base[key], **value}
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            _merge(base[key], value, where + ".")
        elif not _type_ok(base[key], value):
            raise ConfigError(f"config key '{where}' expects {type(base[key]).__name__}, got {type(value).__name__}")
        else:
            base[key] = float(value) if isinstance(base[key], float) and isinstance(value, int) else value


def _set_path(doc: dict, dotted: str, value) -> dict:
    out: dict = {}
    cur = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def canonical_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def parse_config(path=None, overrides: dict | list | None = None) -> RunConfig:
    """Resolve defaults <- file <- overrides and validate; raises :class:`ConfigError`."""
    from .compression import validate_crf

    doc = _defaults()
    if path:
        try:
            text = Path(path).read_text()
            loaded = json.loads(text) if text.strip() else {}
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        _merge(doc, loaded)
    items = overrides.items() if isinstance(overrides, dict) else (overrides or [])
    for key, value in items:
        _merge(doc, _set_path(doc, key, value))
    validate_crf(doc["crf"])
    for c in doc["crf_list"]:
        validate_crf(c)
    cfg = RunConfig(doc, canonical_hash(doc))
    from .models import PSMN, TDM

    cfg.grid(), cfg.synth(), cfg.train()  # construct once to validate ranges
    try:
        TDM(**doc["models"]["tdm"]), PSMN(**doc["models"]["psmn"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid 'models' options: {exc}") from exc
    return cfg


# ---------------------------------------------------------------- run directory


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        try:
            pid = int(lock.read_text().strip() or 0)
            os.kill(pid, 0) if pid > 0 else None
            alive = pid > 0
        except (ValueError, ProcessLookupError, PermissionError, OSError):
            alive = False
        if alive:
            raise PulseMagError(f"run directory is locked by pid {pid}: {lock}") from None
        lock.unlink(missing_ok=True)
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _versions() -> dict:
    import numpy
    import scipy
    import torch

    from . import __version__
    from .compression import encoder_version

    try:
        enc = encoder_version()
    except (EncoderNotFoundError, OSError):
        enc = "unavailable"
    return {"pulsemag": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": numpy.__version__, "scipy": scipy.__version__, "encoder": enc}


def prepare_run_dir(cfg: RunConfig) -> Path:
    d = cfg.run_dir
    for sub in ("checkpoints", "reports", "plots", "frames"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    (d / "resolved_config.json").write_text(json.dumps(cfg.doc, indent=2, sort_keys=True) + "\n")
    (d / "config_hash").write_text(cfg.config_hash + "\n")
    (d / "versions.json").write_text(json.dumps(_versions(), indent=2, sort_keys=True) + "\n")
    return d


# ---------------------------------------------------------------- commands


def _need(cfg: RunConfig, section: str, key: str, flag: str):
    value = cfg[section][key]
    if not value:
        raise ConfigError(f"'{section}.{key}' is required for this command (use {flag})")
    return value


def _manifest(path):
    from .data import load_manifest

    return load_manifest(path)


def _load_models(cfg: RunConfig, need_psi: bool = False):
    from .training import load_checkpoint

    ck = load_checkpoint(_need(cfg, "checkpoints", "theta", "--theta"))
    theta, psi = ck.theta, ck.psi
    if cfg["checkpoints"]["psi"]:
        psi = load_checkpoint(cfg["checkpoints"]["psi"]).psi
    if theta is None:
        raise ConfigError(f"checkpoint {cfg['checkpoints']['theta']} holds no estimator")
    if need_psi and psi is None:
        raise ConfigError("this command needs a magnifier (use --psi or an end-to-end checkpoint)")
    return theta, psi


def cmd_synth(cfg, d):
    from .data import make_dataset

    s = cfg.synth()
    tr = make_dataset(s, cfg["synth"]["n_train"], cfg["seed"], d / "data" / "train", prefix="s")
    va = make_dataset(s, cfg["synth"]["n_val"], cfg["seed"] + 1000, d / "data" / "val", prefix="v")
    print(f"train manifest: {tr.root / 'manifest.json'}")
    print(f"val manifest: {va.root / 'manifest.json'}")


def cmd_compress(cfg, d):
    from .compression import compress_dataset

    crf = cfg["crf"]
    for split in ("train", "val"):
        if cfg["data"][split]:
            out = compress_dataset(_manifest(cfg["data"][split]), crf, d / "data" / f"{split}_crf{crf:02d}", cfg["workers"])
            print(f"{split} manifest (crf {crf}): {out.root / 'manifest.json'}")
    if not (cfg["data"]["train"] or cfg["data"]["val"]):
        raise ConfigError("'data.train' or 'data.val' is required (use --data / --val-data)")


def _after_training(cfg, d, ck, name):
    from .evaluation import evaluate_model, write_eval  # noqa: F401
    from .training import write_history

    write_history(ck.history, d / "reports" / "history.csv")
    print(f"checkpoint: {d / 'checkpoints' / f'{name}.ckpt'}")
    if cfg["data"]["val"]:
        res = evaluate_model(ck.theta, ck.psi, _manifest(cfg["data"]["val"]), cfg.grid(),
                             cfg["eval"]["window"], d / "reports", cfg.config_hash)
        print(f"validation MAE {res.metrics.mae:.3f} BPM")


def cmd_train_stage1(cfg, d):
    from .training import train_stage1

    ck = train_stage1(_manifest(_need(cfg, "data", "train", "--data")), cfg.train(), out_dir=d / "checkpoints")
    _after_training(cfg, d, ck, "stage1")


def cmd_train_stage2(cfg, d):
    from .models import freeze
    from .training import load_checkpoint, train_stage2

    theta_path = _need(cfg, "checkpoints", "theta", "--theta")
    data = _manifest(_need(cfg, "data", "train", "--data"))
    theta = freeze(load_checkpoint(theta_path).theta)
    ck = train_stage2(data, theta, cfg.train(stage2=True), out_dir=d / "checkpoints")
    _after_training(cfg, d, ck, "stage2")


def cmd_train_e2e(cfg, d):
    from .training import train_end_to_end

    ck = train_end_to_end(_manifest(_need(cfg, "data", "train", "--data")), cfg.train(stage2=True), out_dir=d / "checkpoints")
    _after_training(cfg, d, ck, "e2e")


def cmd_eval(cfg, d):
    from .evaluation import evaluate_model

    theta, psi = _load_models(cfg)
    res = evaluate_model(theta, psi, _manifest(_need(cfg, "data", "val", "--val-data")), cfg.grid(),
                         cfg["eval"]["window"], d / "reports", cfg.config_hash)
    m = res.metrics
    r = "undefined" if m.pearson_r is None else f"{m.pearson_r:.3f}"
    print(f"MAE {m.mae:.3f}  RMSE {m.rmse:.3f}  R {r}  n {m.n}")
    print(f"summary: {d / 'reports' / 'summary.json'}")


def cmd_sweep(cfg, d):
    from .evaluation import crf_sweep

    theta, psi = _load_models(cfg)
    conds = {"baseline": (theta, None)}
    if psi is not None:
        conds["with-psmn"] = (theta, psi)
    crf_sweep(_manifest(_need(cfg, "data", "val", "--val-data")), cfg["crf_list"], conds, d / "data",
              d / "reports", cfg.grid())
    (d / "plots" / "error_vs_crf.png").write_bytes((d / "reports" / "error_vs_crf.png").read_bytes())
    print(f"sweep: {d / 'reports' / 'sweep.csv'}")


def cmd_ablate(cfg, d):
    from .evaluation import ablate_losses

    rows = ablate_losses(_manifest(_need(cfg, "data", "train", "--data")), _manifest(_need(cfg, "data", "val", "--val-data")),
                         cfg.train(), d / "reports")
    for r in rows:
        print(f"{r['loss']:>14}: MAE {r['mae']:.3f}  RMSE {r['rmse']:.3f}")


def cmd_compare(cfg, d):
    from .compression import compress_dataset
    from .evaluation import compare_strategies

    tr = _manifest(_need(cfg, "data", "train", "--data"))
    va = _manifest(_need(cfg, "data", "val", "--val-data"))
    crfs = cfg["crf_list"]
    train_c = {c: compress_dataset(tr, c, d / "data" / f"train_crf{c:02d}", cfg["workers"]) for c in crfs}
    val_c = {c: compress_dataset(va, c, d / "data" / f"val_crf{c:02d}", cfg["workers"]) for c in crfs}
    theta = None
    if cfg["checkpoints"]["theta"]:
        theta = _load_models(cfg)[0]
    rows = compare_strategies(tr, train_c, val_c, cfg.train(), cfg_stage2=cfg.train(stage2=True), theta=theta,
                              out_dir=d / "reports")
    (d / "plots" / "strategies.png").write_bytes((d / "reports" / "strategies.png").read_bytes())
    for r in rows:
        print(f"crf {r['crf']:2d}: two-stage {r['two_stage_mae']:.3f}  end-to-end {r['end_to_end_mae']:.3f}  "
              f"delta {r['delta']:+.3f}  ({r['winner']})")


def cmd_visualize(cfg, d):
    from .data import load_sample
    from .evaluation import visualize_magnification

    theta, psi = _load_models(cfg, need_psi=True)
    m = _manifest(_need(cfg, "data", "val", "--val-data"))
    idx = cfg["visualize"]["index"]
    if not 0 <= idx < len(m.records):
        raise ConfigError(f"'visualize.index' {idx} out of range for {len(m.records)} records")
    s = load_sample(m.records[idx], m, cfg.grid())
    out = visualize_magnification(psi, theta, s.clip, d / "frames", s.mask, s.ppg_gt, cfg.grid())
    for name in ("pixel_activity.png", "signals.png"):
        (d / "plots" / name).write_bytes((d / "frames" / name).read_bytes())
    print(f"green-count HR {out['green_hr']:.1f} BPM, predicted HR {out['pred_hr']:.1f} BPM")


HANDLERS = {
    "synth": cmd_synth, "compress": cmd_compress, "train-stage1": cmd_train_stage1, "train-stage2": cmd_train_stage2,
    "train-e2e": cmd_train_e2e, "eval": cmd_eval, "sweep": cmd_sweep, "ablate-loss": cmd_ablate,
    "compare": cmd_compare, "visualize": cmd_visualize,
}


def run_command(name: str, cfg: RunConfig) -> int:
    """Run one command and map failures onto exit codes."""
    if name not in HANDLERS:
        print(f"error: unknown command {name!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with run_lock(cfg.run_dir) as d:
            prepare_run_dir(cfg)
            HANDLERS[name](cfg, d)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EncoderNotFoundError as exc:
        print(f"encoder missing: {exc}", file=sys.stderr)
        return EXIT_ENCODER
    except (PulseMagError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pulsemag", description="rPPG with pulse-signal magnification on compressed video")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--name", help="run name (output goes to <runs_dir>/<name>)")
    p.add_argument("--runs-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--crf", type=int, help="CRF for compress")
    p.add_argument("--crf-list", type=lambda s: [int(x) for x in s.split(",")], help="comma-separated CRFs")
    p.add_argument("--data", help="training (or input) manifest")
    p.add_argument("--val-data", help="validation/test manifest")
    p.add_argument("--theta", help="estimator checkpoint")
    p.add_argument("--psi", help="magnifier checkpoint")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config key, e.g. --set train.lam=0.05")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_FLAG_KEYS = {"name": "name", "runs_dir": "runs_dir", "seed": "seed", "deterministic": "deterministic",
              "epochs": "train.epochs", "crf": "crf", "crf_list": "crf_list", "data": "data.train",
              "val_data": "data.val", "theta": "checkpoints.theta", "psi": "checkpoints.psi"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = []
    for dest, key in _FLAG_KEYS.items():
        v = getattr(args, dest)
        if v is not None:
            overrides.append((key, v))
    try:
        for item in args.set:
            key, _, raw = item.partition("=")
            if not key or not _:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            overrides.append((key.strip(), value))
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_command(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
