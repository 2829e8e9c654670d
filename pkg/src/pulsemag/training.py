"""Stage I, Stage II (frozen estimator) and end-to-end training, plus checkpoint I/O.

Checkpoint file layout (little-endian)::

    b"PMAGCKPT" | uint32 format version | uint64 header length | JSON header | float64 tensor blob

The JSON header carries the model configs and their hashes, the training
config, epoch, RNG state, loss history and data provenance, and an index of the
named tensors in the blob.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import DatasetManifest, Sample, load_samples, split_windows
from .errors import CheckpointVersionError, ConfigError, DivergenceError, FreezeContractError
from .losses import DEFAULT_OFFSETS, LossConfig, ShiftDistribution, combined_loss
from .models import PSMN, TDM, config_hash, init_psmn, init_tdm, param_hash
from .signal import DEFAULT_GRID, FrequencyGrid, PulseSignal, denoise_ppg, estimate_hr

log = logging.getLogger(__name__)

MAGIC = b"PMAGCKPT"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    shift_lr: float = 1e-2
    lam: float = 0.01
    epochs: int = 10
    batch_size: int = 2
    window: int = 300
    overlap: int = 10
    seed: int = 0
    deterministic: bool = True
    grid: FrequencyGrid = field(default_factory=FrequencyGrid)
    clip_norm: float = 5.0
    use_temp: bool = True
    use_freq: bool = True
    offsets: tuple[int, ...] = DEFAULT_OFFSETS
    allow_mixed_crf: bool = False
    model_seed: int | None = None  # defaults to seed
    tdm: dict = field(default_factory=dict)
    psmn: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lr", "shift_lr", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.weight_decay < 0 or self.lam < 0:
            raise ConfigError("weight_decay and lambda must be >= 0")
        if not self.window > self.overlap >= 0:
            raise ConfigError("need window > overlap >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (self.use_temp or self.use_freq):
            raise ConfigError("at least one loss term must be enabled")
        if isinstance(self.grid, dict):
            self.grid = FrequencyGrid(**self.grid)
        self.offsets = tuple(int(k) for k in self.offsets)

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, grid=self.grid, use_temp=self.use_temp, use_freq=self.use_freq)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["offsets"] = list(self.offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainWindow:
    x: torch.Tensor  # (3, T, H, W)
    y: torch.Tensor  # (T,) denoised, z-scored target
    hr: float
    subject: str
    crf: int | None
    fps: float


@dataclass
class Checkpoint:
    kind: str
    theta: TDM | None
    psi: PSMN | None
    shift: ShiftDistribution
    config: dict
    epoch: int = 0
    history: list = field(default_factory=list)
    rng_state: list = field(default_factory=list)
    optim: dict = field(default_factory=dict)  # name -> torch optimizer state_dict
    provenance: dict = field(default_factory=dict)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(dict(self.config))


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag, warn_only=True)


def prepare_windows(data, cfg: TrainConfig, overlap: int | None = None) -> list[TrainWindow]:
    """Window samples and build float32 tensors with denoised targets."""
    samples = load_samples(data, cfg.grid) if isinstance(data, DatasetManifest) else list(data)
    overlap = cfg.overlap if overlap is None else overlap
    out = []
    for w in split_windows(samples, cfg.window, overlap):
        target = denoise_ppg(w.ppg_gt, cfg.grid)
        if target.flags:
            log.warning("skipping window %s: flat ground truth", w.sample_id)
            continue
        out.append(
            TrainWindow(
                x=w.clip.tensor(torch.float32)[0],
                y=torch.from_numpy(target.samples).float(),
                hr=estimate_hr(target, cfg.grid),
                subject=w.subject,
                crf=w.crf,
                fps=w.clip.fps,
            )
        )
    if not out:
        raise ConfigError("no training windows available")
    return out


def _batches(n: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    return [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def _windows_of(data, cfg):
    if data and isinstance(data, (list, tuple)) and isinstance(data[0], TrainWindow):
        return list(data)
    return prepare_windows(data, cfg)


def _fit(kind, theta, psi, windows, cfg, *, train_theta, train_psi, resume=None, out_dir=None, provenance=None, val=None):
    set_deterministic(cfg.deterministic)
    subjects = sorted({w.subject for w in windows})
    if resume is not None:
        shift = resume.shift
        missing = set(subjects) - set(shift.subjects)
        if missing:
            raise ConfigError(f"resume checkpoint lacks subjects {sorted(missing)}")
    else:
        shift = ShiftDistribution(subjects, cfg.offsets)
    net_params = []
    if train_theta:
        net_params += list(theta.parameters())
    if train_psi:
        net_params += list(psi.parameters())
    opt = torch.optim.AdamW(net_params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sgd = torch.optim.SGD(shift.parameters(), lr=cfg.shift_lr)
    history, start = [], 0
    if resume is not None:
        opt.load_state_dict(resume.optim["adam"])
        sgd.load_state_dict(resume.optim["sgd"])
        history, start = list(resume.history), resume.epoch
        if resume.rng_state:
            torch.set_rng_state(torch.tensor(resume.rng_state, dtype=torch.uint8))
    frozen_hash = param_hash(theta) if not train_theta else None
    loss_cfg = cfg.loss_config()
    fs = windows[0].fps

    def snapshot(epoch):
        return Checkpoint(
            kind, theta, psi, shift, cfg.to_dict(), epoch, list(history),
            torch.get_rng_state().tolist(), {"adam": opt.state_dict(), "sgd": sgd.state_dict()}, dict(provenance or {}),
        )

    for model, on in ((theta, train_theta), (psi, train_psi)):
        if model is not None:
            model.train(on)
    for epoch in range(start, cfg.epochs):
        sums, n_items, clipped = np.zeros(3), 0, 0
        for batch in _batches(len(windows), cfg, epoch):
            opt.zero_grad(set_to_none=True)
            sgd.zero_grad(set_to_none=True)
            for i in batch:
                w = windows[i]
                x = w.x.unsqueeze(0)
                pred = theta(psi(x) if psi is not None else x)
                total, temp, freq = combined_loss(pred[0], w.y, w.hr, shift, w.subject, fs, loss_cfg)
                if not torch.isfinite(total):
                    diag = None
                    if out_dir is not None:
                        diag = Path(out_dir) / "diverged.ckpt"
                        save_checkpoint(snapshot(epoch), diag)
                    raise DivergenceError(f"non-finite loss at epoch {epoch + 1}", diag)
                (total / len(batch)).backward()
                sums += [temp.item(), freq.item(), total.item()]
                n_items += 1
            if net_params:
                norm = torch.nn.utils.clip_grad_norm_(net_params, cfg.clip_norm)
                clipped += int(norm > cfg.clip_norm)
            opt.step()
            sgd.step()
        mean = sums / max(n_items, 1)
        row = {"epoch": epoch + 1, "split": "train", "loss_temp": float(mean[0]), "loss_freq": float(mean[1]),
               "loss_total": float(mean[2]), "clipped": clipped}
        history.append(row)
        if val:
            history.append({"epoch": epoch + 1, "split": "val", **_eval_loss(theta, psi, val, shift, cfg)})
        log.info("%s epoch %d/%d loss %.5f (temp %.5f freq %.5f, clipped %d)", kind, epoch + 1, cfg.epochs, mean[2], mean[0], mean[1], clipped)
    if frozen_hash is not None and param_hash(theta) != frozen_hash:
        raise FreezeContractError("frozen estimator parameters changed during training")
    for model in (theta, psi):
        if model is not None:
            model.eval()
    ckpt = snapshot(cfg.epochs)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(ckpt, out_dir / f"{kind}.ckpt")
        write_history(ckpt.history, out_dir / "history.csv")
    return ckpt


def _eval_loss(theta, psi, windows, shift, cfg) -> dict:
    loss_cfg = cfg.loss_config()
    sums = np.zeros(3)
    known = set(shift.subjects)
    with torch.no_grad():
        for w in windows:
            x = w.x.unsqueeze(0)
            pred = theta(psi(x) if psi is not None else x)[0]
            tmp = shift if w.subject in known else ShiftDistribution([w.subject], cfg.offsets)
            total, temp, freq = combined_loss(pred, w.y, w.hr, tmp, w.subject, w.fps, loss_cfg)
            sums += [temp.item(), freq.item(), total.item()]
    m = sums / len(windows)
    return {"loss_temp": float(m[0]), "loss_freq": float(m[1]), "loss_total": float(m[2]), "clipped": 0}


def _provenance(data) -> dict:
    if isinstance(data, DatasetManifest):
        p = data.provenance
        return {k: p[k] for k in ("crf", "encoder_version", "target_kbps", "source", "seed") if k in p}
    return {}


def _crfs(windows) -> set:
    return {w.crf for w in windows}


def calibrate_output(theta: TDM, windows: Sequence[TrainWindow], n: int = 8) -> TDM:
    """Rescale a fresh estimator's head so its output has unit spread on the first windows.

    The targets are z-scored while the pulse in the frames is a fraction of a
    gray level, so a default-initialized head starts orders of magnitude too
    small for the learning rate to close the gap within a desk-scale run.
    """
    dtype = next(theta.parameters()).dtype
    with torch.no_grad():
        ys = torch.stack([theta(w.x.unsqueeze(0).to(dtype))[0] for w in windows[:n]])
        sd = ys.std(dim=-1).mean()
        if not sd > 64 * torch.finfo(dtype).eps * float(ys.abs().max()):
            log.warning("output calibration skipped: flat estimator output")
            return theta
        theta.head.weight.div_(sd)
    return theta


def train_stage1(data, cfg: TrainConfig, *, theta: TDM | None = None, resume: Checkpoint | None = None, out_dir=None, val=None) -> Checkpoint:
    """Fit the estimator on (uncompressed) windows with the combined loss."""
    windows = _windows_of(data, cfg)
    ms = cfg.seed if cfg.model_seed is None else cfg.model_seed
    if resume is not None:
        theta = resume.theta
    elif theta is None:
        theta = calibrate_output(init_tdm(ms, **{"size": windows[0].x.shape[-1], **cfg.tdm}), windows)
    return _fit("stage1", theta, None, windows, cfg, train_theta=True, train_psi=False, resume=resume,
                out_dir=out_dir, provenance=_provenance(data), val=val)


def train_stage2(data, theta: TDM, cfg: TrainConfig, *, psi: PSMN | None = None, resume: Checkpoint | None = None, out_dir=None, val=None) -> Checkpoint:
    """Fit the magnifier on compressed windows through the frozen estimator."""
    if not getattr(theta, "frozen", False) or any(p.requires_grad for p in theta.parameters()):
        raise FreezeContractError("train_stage2 needs a frozen estimator (call models.freeze first)")
    windows = _windows_of(data, cfg)
    if len(_crfs(windows)) > 1 and not cfg.allow_mixed_crf:
        raise ConfigError(f"refusing to mix compression levels {sorted(map(str, _crfs(windows)))} (set allow_mixed_crf)")
    ms = cfg.seed if cfg.model_seed is None else cfg.model_seed
    if resume is not None:
        psi = resume.psi
    elif psi is None:
        psi = init_psmn(ms + 1, **cfg.psmn)
    return _fit("stage2", theta, psi, windows, cfg, train_theta=False, train_psi=True, resume=resume,
                out_dir=out_dir, provenance=_provenance(data), val=val)


def train_end_to_end(data, cfg: TrainConfig, *, resume: Checkpoint | None = None, out_dir=None, val=None) -> Checkpoint:
    """Fit estimator and magnifier jointly from scratch on compressed windows."""
    windows = _windows_of(data, cfg)
    ms = cfg.seed if cfg.model_seed is None else cfg.model_seed
    if resume is not None:
        theta, psi = resume.theta, resume.psi
    else:
        theta = calibrate_output(init_tdm(ms, **{"size": windows[0].x.shape[-1], **cfg.tdm}), windows)
        psi = init_psmn(ms + 1, **cfg.psmn)
    return _fit("e2e", theta, psi, windows, cfg, train_theta=True, train_psi=True, resume=resume,
                out_dir=out_dir, provenance=_provenance(data), val=val)


# ---------------------------------------------------------------- persistence


def write_history(history: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "loss_temp", "loss_freq", "loss_total"])
        for r in history:
            w.writerow([r["epoch"], r["split"], repr(float(r["loss_temp"])), repr(float(r["loss_freq"])), repr(float(r["loss_total"]))])


def _flatten_optim(name: str, sd: dict, tensors: dict) -> dict:
    meta = {"param_groups": sd["param_groups"], "state": {}}
    for pid, st in sd["state"].items():
        entry = {}
        for key, val in st.items():
            if torch.is_tensor(val):
                tname = f"optim/{name}/{pid}/{key}"
                tensors[tname] = val
                entry[key] = {"tensor": tname}
            else:
                entry[key] = {"value": val}
        meta["state"][str(pid)] = entry
    return meta


def _unflatten_optim(meta: dict, tensors: dict) -> dict:
    state = {}
    for pid, entry in meta["state"].items():
        state[int(pid)] = {k: tensors[v["tensor"]] if "tensor" in v else v["value"] for k, v in entry.items()}
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, torch.Tensor] = {}
    models = {}
    for role, model in (("theta", ckpt.theta), ("psi", ckpt.psi)):
        if model is None:
            continue
        models[role] = {"kind": model.kind, "config": model.config, "config_hash": config_hash(model),
                        "param_hash": param_hash(model), "frozen": bool(getattr(model, "frozen", False))}
        for name, t in model.state_dict().items():
            tensors[f"{role}/{name}"] = t
    tensors["shift/logits"] = ckpt.shift.logits.detach()
    optim = {name: _flatten_optim(name, sd, tensors) for name, sd in sorted(ckpt.optim.items())}

    index, offset, blobs = [], 0, []
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        data = t.to(torch.float64).contiguous().numpy().astype("<f8").tobytes()
        index.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format": "pulsemag-checkpoint",
        "kind": ckpt.kind,
        "models": models,
        "shift": {"offsets": list(ckpt.shift.offsets), "subjects": list(ckpt.shift.subjects)},
        "config": ckpt.config,
        "config_hash": hashlib.sha256(json.dumps(ckpt.config, sort_keys=True).encode()).hexdigest()[:16],
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "rng_state": ckpt.rng_state,
        "optim": optim,
        "provenance": ckpt.provenance,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    return path


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointVersionError(f"{path} is not a pulsemag checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"{path}: checkpoint format v{version}, expected v{FORMAT_VERSION}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
    return header, len(MAGIC) + 12 + hlen


def load_checkpoint(path, expected_config_hash: str | None = None) -> Checkpoint:
    """Load a checkpoint; raises :class:`CheckpointVersionError` on any hash mismatch."""
    header, start = read_header(path)
    raw = Path(path).read_bytes()[start:]
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(raw, dtype="<f8", count=math.prod(e["shape"]) if e["shape"] else 1, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.copy().reshape(e["shape"])).to(getattr(torch, e["dtype"]))

    cfg_hash = hashlib.sha256(json.dumps(header["config"], sort_keys=True).encode()).hexdigest()[:16]
    if cfg_hash != header["config_hash"]:
        raise CheckpointVersionError(f"{path}: stored training-config hash does not match its config")
    if expected_config_hash is not None and expected_config_hash != header["config_hash"]:
        raise CheckpointVersionError(f"{path}: config hash {header['config_hash']} != expected {expected_config_hash}")

    built = {}
    for role, meta in header["models"].items():
        model = TDM(**meta["config"]) if meta["kind"] == "tdm" else PSMN(**meta["config"])
        if config_hash(model) != meta["config_hash"]:
            raise CheckpointVersionError(f"{path}: {role} architecture hash mismatch")
        sd = {k[len(role) + 1 :]: v for k, v in tensors.items() if k.startswith(role + "/")}
        model.load_state_dict(sd)
        if meta.get("frozen"):
            model.requires_grad_(False)
            model.frozen = True
        model.eval()
        built[role] = model

    shift = ShiftDistribution(header["shift"]["subjects"], header["shift"]["offsets"], dtype=tensors["shift/logits"].dtype)
    with torch.no_grad():
        shift.logits.copy_(tensors["shift/logits"])
    optim = {name: _unflatten_optim(meta, tensors) for name, meta in header["optim"].items()}
    return Checkpoint(
        header["kind"], built.get("theta"), built.get("psi"), shift, header["config"], header["epoch"],
        header["history"], header["rng_state"], optim, header["provenance"],
    )
