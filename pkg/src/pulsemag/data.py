"""Synthetic pulsatile video, on-disk datasets, ingestion and windowing.

On-disk layout of a dataset root::

    manifest.json
    <sample_id>/frames/000000.png ...
    <sample_id>/gt.csv            (t_sec,ppg)
    <sample_id>/mask.png          (optional)

A record may reference ``video`` (an encoded file) instead of ``frames``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np

from .errors import ConfigError, IngestionError
from .models import VideoClip
from .signal import DEFAULT_GRID, FrequencyGrid, PulseSignal, denoise_ppg

log = logging.getLogger(__name__)

HR_LIMITS = (40.0, 180.0)


@dataclass(frozen=True)
class SynthConfig:
    T: int = 300
    H: int = 96
    W: int = 96
    fps: float = 30.0
    hr_bpm: float = 72.0
    hr_end_bpm: float | None = None  # linear ramp from hr_bpm when set
    pulse_amplitude: float = 0.004
    channel_weights: tuple[float, float, float] = (0.35, 1.0, 0.55)
    noise_std: float = 0.01
    skin_color: tuple[float, float, float] = (0.80, 0.60, 0.50)
    # ellipse centre and semi-axes as fractions of (W, H)
    mask_center: tuple[float, float] = (0.5, 0.5)
    mask_axes: tuple[float, float] = (0.32, 0.42)
    motion_amp: float = 0.0
    motion_hz: float = 0.2
    hr_range: tuple[float, float] = (55.0, 95.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = sorted((self.hr_bpm, self.hr_end_bpm if self.hr_end_bpm is not None else self.hr_bpm))
        if lo < HR_LIMITS[0] or hi > HR_LIMITS[1]:
            raise ConfigError(f"HR trajectory [{lo}, {hi}] BPM outside {list(HR_LIMITS)}")
        if self.hr_range[0] < HR_LIMITS[0] or self.hr_range[1] > HR_LIMITS[1] or self.hr_range[0] > self.hr_range[1]:
            raise ConfigError(f"hr_range {self.hr_range} invalid")
        if self.T < 2 or self.H < 8 or self.W < 8 or not self.fps > 0:
            raise ConfigError("invalid clip geometry")
        if not 0 <= self.pulse_amplitude <= 1 or self.noise_std < 0:
            raise ConfigError("pulse_amplitude must lie in [0, 1] and noise_std be >= 0")

    def hr_at(self, t: np.ndarray) -> np.ndarray:
        if self.hr_end_bpm is None:
            return np.full_like(t, self.hr_bpm, dtype=np.float64)
        duration = self.T / self.fps
        return self.hr_bpm + (self.hr_end_bpm - self.hr_bpm) * t / duration

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    clip: VideoClip
    ppg_gt: PulseSignal
    hr_gt: list[float]
    subject: str
    mask: np.ndarray
    sample_id: str = ""
    crf: int | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    records: list[dict]
    fps: float = 30.0
    size: int = 96
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)

    def __len__(self):
        return len(self.records)

    @property
    def subjects(self) -> list[str]:
        return [r["subject"] for r in self.records]

    def to_json(self) -> dict:
        return {"fps": self.fps, "size": self.size, "provenance": self.provenance, "records": self.records}

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    def path_of(self, rel: str) -> Path:
        return self.root / rel


# ---------------------------------------------------------------- synthesis


def synth_ppg_waveform(cfg: SynthConfig) -> PulseSignal:
    """Two-harmonic pulse whose phase integrates the configured HR trajectory."""
    t = np.arange(cfg.T) / cfg.fps
    hr = cfg.hr_at(t)
    # trapezoidal phase integral of hr/60 starting at zero
    phase = np.concatenate([[0.0], np.cumsum(0.5 * (hr[1:] + hr[:-1]) / 60.0 / cfg.fps)])
    s = np.sin(2 * np.pi * phase) + 0.3 * np.sin(4 * np.pi * phase + 0.7)
    return PulseSignal(s, cfg.fps)


def ellipse_mask(cfg: SynthConfig, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0 : cfg.H, 0 : cfg.W]
    cx = cfg.mask_center[0] * cfg.W + dx
    cy = cfg.mask_center[1] * cfg.H + dy
    ax, ay = cfg.mask_axes[0] * cfg.W, cfg.mask_axes[1] * cfg.H
    return ((xx + 0.5 - cx) / ax) ** 2 + ((yy + 0.5 - cy) / ay) ** 2 <= 1.0


def window_hrs(cfg: SynthConfig, win: int = 300) -> list[float]:
    """Mean configured HR of each non-overlapping evaluation window (whole clip if shorter)."""
    t = np.arange(cfg.T) / cfg.fps
    hr = cfg.hr_at(t)
    if cfg.T < win:
        return [float(hr.mean())]
    return [float(hr[s : s + win].mean()) for s in range(0, cfg.T - win + 1, win)]


def render_video(cfg: SynthConfig, ppg: PulseSignal, sample_id: str = "", subject: str = "") -> Sample:
    if len(ppg) != cfg.T:
        raise ConfigError(f"ppg length {len(ppg)} != T {cfg.T}")
    mask = ellipse_mask(cfg)
    if not mask.any():
        raise ConfigError("skin mask is empty")
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(cfg.T) / cfg.fps
    skin = np.asarray(cfg.skin_color, dtype=np.float64)
    weights = np.asarray(cfg.channel_weights, dtype=np.float64)
    pulse = cfg.pulse_amplitude * ppg.samples[:, None] * weights[None, :]  # (T, 3)
    frames = np.zeros((cfg.T, cfg.H, cfg.W, 3), dtype=np.float32)
    moving = cfg.motion_amp != 0
    for i in range(cfg.T):
        m = ellipse_mask(cfg, dx=cfg.motion_amp * np.sin(2 * np.pi * cfg.motion_hz * t[i])) if moving else mask
        frame = np.zeros((cfg.H, cfg.W, 3))
        frame[m] = skin + pulse[i]
        if cfg.noise_std > 0:
            frame[m] += rng.normal(0.0, cfg.noise_std, size=(int(m.sum()), 3))
        frames[i] = np.clip(frame, 0.0, 1.0)
    return Sample(
        clip=VideoClip(frames, cfg.fps),
        ppg_gt=ppg,
        hr_gt=window_hrs(cfg),
        subject=subject,
        mask=mask,
        sample_id=sample_id,
        meta={"hr_bpm": cfg.hr_bpm, "hr_end_bpm": cfg.hr_end_bpm},
    )


def synth_configs(cfg: SynthConfig, n: int, seed: int, prefix: str = "s") -> list[tuple[str, SynthConfig]]:
    """Per-sample configs with HR jittered uniformly over ``cfg.hr_range``."""
    ss = np.random.SeedSequence(seed)
    out = []
    for i, child in enumerate(ss.spawn(n)):
        rng = np.random.default_rng(child)
        hr = round(float(rng.uniform(*cfg.hr_range)), 6)
        sample_seed = int(rng.integers(0, 2**31 - 1))
        out.append((f"{prefix}{i:03d}", replace(cfg, hr_bpm=hr, hr_end_bpm=None, seed=sample_seed)))
    return out


def synth_samples(cfg: SynthConfig, n: int, seed: int, prefix: str = "s") -> Iterator[Sample]:
    for sid, c in synth_configs(cfg, n, seed, prefix):
        yield render_video(c, synth_ppg_waveform(c), sample_id=sid, subject=sid)


# ---------------------------------------------------------------- disk I/O


def write_frames(frames: np.ndarray, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    q = np.clip(np.rint(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)
    for i, f in enumerate(q):
        cv2.imwrite(str(directory / f"{i:06d}.png"), cv2.cvtColor(f, cv2.COLOR_RGB2BGR))


def read_frames(directory: Path) -> np.ndarray:
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise IngestionError("no PNG frames found", directory)
    out = []
    for f in files:
        img = cv2.imread(str(f), cv2.IMREAD_COLOR)
        if img is None:
            raise IngestionError("unreadable frame", f)
        out.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
    return np.stack(out).astype(np.float32) / 255.0


def write_sample(sample: Sample, root: Path) -> dict:
    sdir = Path(root) / sample.sample_id
    write_frames(sample.clip.frames, sdir / "frames")
    sample.ppg_gt.to_csv(sdir / "gt.csv", column="ppg")
    cv2.imwrite(str(sdir / "mask.png"), sample.mask.astype(np.uint8) * 255)
    rec = {
        "id": sample.sample_id,
        "subject": sample.subject,
        "frames": f"{sample.sample_id}/frames",
        "gt": f"{sample.sample_id}/gt.csv",
        "mask": f"{sample.sample_id}/mask.png",
        "crf": 0,
    }
    rec.update({k: v for k, v in sample.meta.items() if v is not None})
    return rec


def make_dataset(cfg: SynthConfig, n_samples: int, seed: int, root, prefix: str = "s") -> DatasetManifest:
    """Render ``n_samples`` synthetic clips under ``root`` and write ``manifest.json``."""
    root = Path(root)
    records = [write_sample(s, root) for s in synth_samples(cfg, n_samples, seed, prefix)]
    manifest = DatasetManifest(
        root,
        records,
        fps=cfg.fps,
        size=cfg.H,
        provenance={"source": "synthetic", "seed": seed, "synth": cfg.to_dict(), "crf": 0},
    )
    manifest.save()
    return manifest


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise IngestionError("manifest not found", path)
    doc = json.loads(path.read_text())
    m = DatasetManifest(path.parent, doc["records"], doc.get("fps", 30.0), doc.get("size", 96), doc.get("provenance", {}))
    if not m.records:
        raise IngestionError("manifest has no records", path)
    for rec in m.records:
        if not rec.get("subject"):
            raise IngestionError(f"record {rec.get('id')} has no subject", path)
        for key in ("frames", "video", "gt", "mask"):
            if key in rec and not m.path_of(rec[key]).exists():
                raise IngestionError(f"record {rec.get('id')}: missing {key}", m.path_of(rec[key]))
        if "frames" not in rec and "video" not in rec:
            raise IngestionError(f"record {rec.get('id')} has neither frames nor video", path)
    return m


def _resize(frames: np.ndarray, size: int) -> np.ndarray:
    if frames.shape[1:3] == (size, size):
        return frames
    return np.stack([cv2.resize(f, (size, size), interpolation=cv2.INTER_AREA) for f in frames])


def load_sample(record: dict, manifest: DatasetManifest, grid: FrequencyGrid = DEFAULT_GRID, denoise: bool = True) -> Sample:
    """Decode frames, resize to the manifest size, align and denoise the PPG, apply the mask."""
    fps = float(record.get("fps", manifest.fps))
    if "video" in record:
        from .compression import decode

        frames = decode(manifest.path_of(record["video"])).frames
    else:
        frames = read_frames(manifest.path_of(record["frames"]))
    frames = _resize(frames, manifest.size)
    T = frames.shape[0]

    gt_path = manifest.path_of(record["gt"])
    try:
        data = np.loadtxt(gt_path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"unreadable ground truth ({exc})", gt_path) from exc
    t_gt, v_gt = data[:, 0], data[:, 1]
    clip_dur, gt_dur = T / fps, t_gt[-1] - t_gt[0] + np.median(np.diff(t_gt))
    if abs(gt_dur - clip_dur) > 0.05 * clip_dur:
        raise IngestionError(f"ground truth covers {gt_dur:.2f}s but clip is {clip_dur:.2f}s", gt_path)
    t_clip = np.arange(T) / fps + t_gt[0]
    ppg = PulseSignal(np.interp(t_clip, t_gt, v_gt), fps)
    if denoise:
        ppg = denoise_ppg(ppg, grid)

    if "mask" in record:
        m = cv2.imread(str(manifest.path_of(record["mask"])), cv2.IMREAD_GRAYSCALE)
        if m is None:
            raise IngestionError("unreadable mask", manifest.path_of(record["mask"]))
        if m.shape != (manifest.size, manifest.size):
            m = cv2.resize(m, (manifest.size, manifest.size), interpolation=cv2.INTER_NEAREST)
        mask = m > 127
        frames = frames * mask[None, :, :, None]
    else:
        log.warning("record %s has no mask; using the full frame", record.get("id"))
        mask = np.ones(frames.shape[1:3], dtype=bool)

    hr = record.get("hr_bpm")
    return Sample(
        clip=VideoClip(frames.astype(np.float32), fps),
        ppg_gt=ppg,
        hr_gt=[float(hr)] * max(1, T // 300) if hr is not None else [],
        subject=str(record["subject"]),
        mask=mask,
        sample_id=str(record.get("id", "")),
        crf=record.get("crf"),
        meta={k: record[k] for k in ("profile",) if k in record},
    )


def load_samples(manifest: DatasetManifest, grid: FrequencyGrid = DEFAULT_GRID) -> list[Sample]:
    return [load_sample(r, manifest, grid) for r in manifest.records]


# ---------------------------------------------------------------- windowing


def window_starts(T: int, win: int = 300, overlap: int = 10) -> list[int]:
    if not 0 <= overlap < win:
        raise ConfigError(f"need 0 <= overlap < win, got overlap={overlap}, win={win}")
    if T < win:
        raise ConfigError(f"clip of {T} frames shorter than window {win}")
    stride = win - overlap
    return list(range(0, T - win + 1, stride))


def window_clip(sample: Sample, win: int = 300, overlap: int = 10) -> list[Sample]:
    """Cut a sample into fixed-length windows; the trailing partial window is dropped.

    Training uses ``overlap=10`` (stride 290); evaluation uses ``overlap=0``.
    """
    out = []
    for j, s in enumerate(window_starts(len(sample.clip), win, overlap)):
        hr = sample.hr_gt[min(j, len(sample.hr_gt) - 1)] if (overlap == 0 and sample.hr_gt) else None
        out.append(
            Sample(
                clip=VideoClip(sample.clip.frames[s : s + win], sample.clip.fps),
                ppg_gt=PulseSignal(sample.ppg_gt.samples[s : s + win], sample.ppg_gt.fs),
                hr_gt=[hr] if hr is not None else [],
                subject=sample.subject,
                mask=sample.mask,
                sample_id=f"{sample.sample_id}@{s}",
                crf=sample.crf,
                meta=dict(sample.meta, start=s),
            )
        )
    return out


def split_windows(samples: Sequence[Sample], win: int, overlap: int) -> list[Sample]:
    return [w for s in samples for w in window_clip(s, win, overlap)]
