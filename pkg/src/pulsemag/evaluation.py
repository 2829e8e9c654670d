"""HR metrics, windowed evaluation, CRF sweeps, loss ablation, strategy comparison and
magnification visualisation. Every report writer is deterministic for fixed inputs.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .compression import compress_dataset  # noqa: E402
from .data import DatasetManifest, Sample, load_manifest, load_samples, split_windows  # noqa: E402
from .errors import ConfigError  # noqa: E402
from .models import PSMN, TDM, VideoClip, freeze, pipeline_forward, psmn_forward, tdm_forward  # noqa: E402
from .signal import DEFAULT_GRID, FrequencyGrid, PulseSignal, bandpass, estimate_hr, snr_db  # noqa: E402

log = logging.getLogger(__name__)

EVAL_WINDOW = 300


@dataclass(frozen=True)
class HRMetrics:
    mae: float
    rmse: float
    pearson_r: float | None  # None when either series is constant
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SweepRow:
    crf: int
    condition: str
    mae: float
    rmse: float
    pearson_r: float | None
    bitrate_kbps: float
    n: int
    green_snr_db: float


@dataclass
class EvalResult:
    rows: list[tuple[str, float, float]]  # (window_id, pred_bpm, gt_bpm)
    metrics: HRMetrics


def hr_metrics(pred, gt) -> HRMetrics:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError(f"pred and gt must be 1-D of equal length, got {pred.shape} and {gt.shape}")
    if pred.size == 0:
        raise ValueError("no HR values to score")
    d = pred - gt
    mae, rmse = float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d * d)))
    pc, gc = pred - pred.mean(), gt - gt.mean()
    den = math.sqrt(float(pc @ pc) * float(gc @ gc))
    r = float(np.clip((pc @ gc) / den, -1.0, 1.0)) if den > 0 else None
    return HRMetrics(mae, max(rmse, mae), r, int(pred.size))


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _samples(data, grid) -> list[Sample]:
    if isinstance(data, DatasetManifest):
        return load_samples(data, grid)
    if isinstance(data, (str, Path)):
        return load_samples(load_manifest(data), grid)
    return list(data)


def predictor(theta: TDM | None, psi: PSMN | None = None) -> Callable[[Sample], PulseSignal]:
    if theta is None:
        raise ConfigError("an estimator is required")
    if psi is None:
        return lambda w: tdm_forward(theta, w.clip)
    return lambda w: pipeline_forward(theta, psi, w.clip)


def evaluate_windows(predict: Callable[[Sample], PulseSignal], data, grid: FrequencyGrid = DEFAULT_GRID,
                     window: int | None = EVAL_WINDOW) -> EvalResult:
    """Score ``predict`` on non-overlapping windows (``window=None``: whole clips)."""
    samples = _samples(data, grid)
    windows = samples if window is None else split_windows(samples, window, 0)
    if not windows:
        raise ConfigError("no evaluation windows")
    rows = []
    for w in windows:
        pred = estimate_hr(bandpass(predict(w), grid), grid)
        gt = estimate_hr(bandpass(w.ppg_gt, grid), grid)
        rows.append((w.sample_id, pred, gt))
    return EvalResult(rows, hr_metrics([r[1] for r in rows], [r[2] for r in rows]))


def write_eval(result: EvalResult, out_dir, config_hash: str = "", provenance: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_id", "pred_bpm", "gt_bpm"])
        for wid, p, g in result.rows:
            w.writerow([wid, _fmt(p), _fmt(g)])
    doc = {**result.metrics.to_dict(), "config_hash": config_hash, "provenance": provenance or {}}
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def evaluate_model(theta: TDM, psi: PSMN | None, data, grid: FrequencyGrid = DEFAULT_GRID,
                   window: int | None = EVAL_WINDOW, out_dir=None, config_hash: str = "") -> EvalResult:
    """Per-window HR table and metrics; ``psi=None`` scores the estimator alone."""
    res = evaluate_windows(predictor(theta, psi), data, grid, window)
    if out_dir is not None:
        prov = data.provenance if isinstance(data, DatasetManifest) else {}
        write_eval(res, out_dir, config_hash, prov)
    return res


def green_trace(sample: Sample) -> PulseSignal:
    """Per-frame mean of the green channel inside the skin mask."""
    g = sample.clip.frames[..., 1][:, sample.mask]
    return PulseSignal(g.mean(axis=1).astype(np.float64), sample.clip.fps)


def green_snr(data, grid: FrequencyGrid = DEFAULT_GRID, window: int = EVAL_WINDOW) -> float:
    """Mean snr_db of the raw green trace over evaluation windows, referenced to the PPG HR."""
    vals = []
    for w in split_windows(_samples(data, grid), window, 0):
        hr = estimate_hr(bandpass(w.ppg_gt, grid), grid)
        vals.append(snr_db(green_trace(w), hr, grid))
    return float(np.mean(vals))


# ---------------------------------------------------------------- CRF sweep

Models = tuple  # (theta, psi or None)


def _compressed(manifest: DatasetManifest, crf: int, work_dir: Path, reuse: bool) -> DatasetManifest:
    root = work_dir / f"crf{crf:02d}"
    if reuse and (root / "manifest.json").exists():
        m = load_manifest(root / "manifest.json")
        if m.provenance.get("crf") == crf and len(m.records) == len(manifest.records):
            return m
    return compress_dataset(manifest, crf, root)


def _bitrate(manifest: DatasetManifest) -> float:
    rates = [r.get("profile", {}).get("bitrate_kbps") for r in manifest.records]
    rates = [x for x in rates if x]
    return float(np.mean(rates)) if rates else float("nan")


def crf_sweep(test_manifest: DatasetManifest, crf_list: Sequence[int],
              conditions: Mapping[str, Models | Callable[[int], Models]], work_dir, out_dir=None,
              grid: FrequencyGrid = DEFAULT_GRID, reuse: bool = True) -> list[SweepRow]:
    """Compress the test set at each CRF and score every condition on it.

    A condition is either a fixed ``(theta, psi)`` pair or a callable mapping the
    CRF to one (for matched-compression retraining). Rows are only written once
    every (crf, condition) has been scored.
    """
    crfs = list(dict.fromkeys(int(c) for c in crf_list))
    rows = []
    for crf in crfs:
        cm = _compressed(test_manifest, crf, Path(work_dir), reuse)
        samples = load_samples(cm, grid)
        snr = green_snr(samples, grid)
        for name, cond in conditions.items():
            theta, psi = cond(crf) if callable(cond) else cond
            m = evaluate_windows(predictor(theta, psi), samples, grid).metrics
            rows.append(SweepRow(crf, name, m.mae, m.rmse, m.pearson_r, _bitrate(cm), m.n, snr))
            log.info("crf %d %s: MAE %.3f RMSE %.3f SNR %.2f dB", crf, name, m.mae, m.rmse, snr)
    if out_dir is not None:
        write_sweep(rows, out_dir)
    return rows


def write_sweep(rows: Sequence[SweepRow], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["crf", "condition", "mae", "rmse", "pearson_r", "bitrate_kbps", "n", "green_snr_db"])
        for r in rows:
            w.writerow([r.crf, r.condition, _fmt(r.mae), _fmt(r.rmse), _fmt(r.pearson_r), _fmt(r.bitrate_kbps), r.n, _fmt(r.green_snr_db)])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for cond in dict.fromkeys(r.condition for r in rows):
        sel = [r for r in rows if r.condition == cond]
        ax.plot([r.crf for r in sel], [r.mae for r in sel], "o-", label=f"{cond} MAE")
        ax.plot([r.crf for r in sel], [r.rmse for r in sel], "s--", alpha=0.6, label=f"{cond} RMSE")
    ax.set_xlabel("CRF")
    ax.set_ylabel("HR error (BPM)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "error_vs_crf.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------- ablation / comparison


def ablate_losses(train_data, val_data, cfg, out_dir=None, grid: FrequencyGrid | None = None) -> list[dict]:
    """Three Stage I runs (temporal only, frequency only, both), same seed and data."""
    from .training import prepare_windows, train_stage1

    grid = grid or cfg.grid
    windows = prepare_windows(train_data, cfg)
    val = _samples(val_data, grid)
    rows = []
    for name, flags in (("L_temp", (True, False)), ("L_freq", (False, True)), ("L_temp+L_freq", (True, True))):
        c = replace(cfg, use_temp=flags[0], use_freq=flags[1])
        ck = train_stage1(windows, c)
        m = evaluate_model(ck.theta, None, val, grid).metrics
        rows.append({"loss": name, "lambda": c.lam, "config_hash": c.digest(), **m.to_dict()})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["loss", "lambda", "config_hash", "mae", "rmse", "pearson_r", "n"])
            for r in rows:
                w.writerow([r["loss"], r["lambda"], r["config_hash"], _fmt(r["mae"]), _fmt(r["rmse"]), _fmt(r["pearson_r"]), r["n"]])
    return rows


def _nan_metrics(n: int) -> HRMetrics:
    return HRMetrics(float("nan"), float("nan"), None, n)


def _winner(two_stage: float, end_to_end: float) -> str:
    if np.isnan(end_to_end):
        return "n/a"
    return "two_stage" if two_stage < end_to_end else ("end_to_end" if end_to_end < two_stage else "tie")


def compare_strategies(train_u, train_c: Mapping[int, object], val_c: Mapping[int, object], cfg, *,
                       cfg_stage2=None, theta: TDM | None = None, out_dir=None,
                       grid: FrequencyGrid | None = None, include_end_to_end: bool = True) -> list[dict]:
    """Two-stage vs end-to-end (and matched-compression estimator-only) per CRF.

    ``train_c``/``val_c`` map each CRF to compressed training/validation data.
    The baseline fine-tunes the Stage I estimator on the matched-CRF training
    set for the Stage II epoch budget. ``delta = two_stage - end_to_end``;
    negative favours the two-stage procedure. With ``include_end_to_end`` off
    the joint run is skipped and its columns are NaN.
    """
    from .training import prepare_windows, train_end_to_end, train_stage1, train_stage2

    grid = grid or cfg.grid
    cfg2 = cfg_stage2 or cfg
    if theta is None:
        theta = train_stage1(train_u, cfg).theta
    theta = freeze(copy.deepcopy(theta))
    rows = []
    for crf in sorted(train_c):
        windows = prepare_windows(train_c[crf], cfg2)
        val = _samples(val_c[crf], grid)
        s2 = train_stage2(windows, theta, cfg2)
        psi = s2.psi
        e2e = train_end_to_end(windows, cfg2) if include_end_to_end else None
        base_theta = copy.deepcopy(theta)
        base_theta.requires_grad_(True)
        base_theta.frozen = False
        base_ck = train_stage1(windows, cfg2, theta=base_theta)
        base = base_ck.theta
        m2 = evaluate_model(theta, psi, val, grid).metrics
        me = evaluate_model(e2e.theta, e2e.psi, val, grid).metrics if e2e is not None else _nan_metrics(len(val))
        mb = evaluate_model(base, None, val, grid).metrics
        rows.append({
            "crf": crf, "two_stage_mae": m2.mae, "end_to_end_mae": me.mae, "baseline_mae": mb.mae,
            "two_stage_rmse": m2.rmse, "end_to_end_rmse": me.rmse, "baseline_rmse": mb.rmse,
            "delta": m2.mae - me.mae, "delta_vs_baseline": m2.mae - mb.mae,
            "winner": _winner(m2.mae, me.mae),
            "models": {"theta": theta, "psi": psi, "e2e": e2e, "baseline": base},
            "histories": {"two_stage": s2.history, "end_to_end": e2e.history if e2e is not None else [],
                          "baseline": base_ck.history},
        })
        log.info("crf %d: two-stage %.3f, end-to-end %.3f, baseline %.3f", crf, m2.mae, me.mae, mb.mae)
    if out_dir is not None:
        write_comparison(rows, out_dir)
    return rows


def write_comparison(rows: Sequence[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["crf", "two_stage_mae", "end_to_end_mae", "baseline_mae", "two_stage_rmse", "end_to_end_rmse",
            "baseline_rmse", "delta", "delta_vs_baseline", "winner"]
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if c in ("crf", "winner") else _fmt(r[c]) for c in cols])
    crfs = [r["crf"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(crfs, [r["two_stage_mae"] for r in rows], "o-", label="two-stage")
    ax.plot(crfs, [r["end_to_end_mae"] for r in rows], "s-", label="end-to-end")
    ax.plot(crfs, [r["baseline_mae"] for r in rows], "^:", label="estimator only")
    ax.set_xlabel("CRF")
    ax.set_ylabel("HR MAE (BPM)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "strategies.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------- visualisation

GREEN_HUE = (80.0, 160.0)
MAGENTA_HUE = (280.0, 340.0)
MIN_SATURATION = 0.2


def classify_pixels(frames: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame counts of green and magenta pixels (hue in degrees, HSV saturation >= 0.2)."""
    frames = np.clip(np.asarray(frames, dtype=np.float32), 0.0, 1.0)
    if mask is None:
        mask = np.ones(frames.shape[1:3], dtype=bool)
    green, magenta = np.zeros(len(frames), int), np.zeros(len(frames), int)
    for t, f in enumerate(frames):
        hsv = cv2.cvtColor(f, cv2.COLOR_RGB2HSV)  # float input: H in [0, 360), S in [0, 1]
        h, s = hsv[..., 0][mask], hsv[..., 1][mask]
        sat = s >= MIN_SATURATION
        green[t] = np.count_nonzero(sat & (h >= GREEN_HUE[0]) & (h <= GREEN_HUE[1]))
        magenta[t] = np.count_nonzero(sat & (h >= MAGENTA_HUE[0]) & (h <= MAGENTA_HUE[1]))
    return green, magenta


def pulse_view(frames: np.ndarray, mask: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """Display the temporal colour variation of a clip around mid-grey.

    Each pixel's temporal mean is removed, the deviation is lightly blurred in
    space and scaled so three robust standard deviations of in-mask deviation
    span half the display range.
    """
    f = np.asarray(frames, dtype=np.float32)
    d = f - f.mean(axis=0, keepdims=True)
    d = np.stack([cv2.GaussianBlur(x, (0, 0), sigma) for x in d])
    vals = d[:, mask]
    scale = 3.0 * float(np.median(np.abs(vals - np.median(vals))) * 1.4826) or 1.0
    return np.clip(0.5 + 0.5 * d / scale, 0.0, 1.0) * mask[None, :, :, None]


def visualize_magnification(psi: PSMN, theta: TDM, clip: VideoClip, out_dir, mask: np.ndarray | None = None,
                            ppg_gt: PulseSignal | None = None, grid: FrequencyGrid = DEFAULT_GRID,
                            n_frames: int = 6) -> dict:
    """Export magnified frames and the green/magenta activity of the magnified clip."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    mask = np.ones(clip.shape[1:3], dtype=bool) if mask is None else mask
    mag = psmn_forward(psi, clip)
    shown = mag.clamped().frames
    for i in np.linspace(0, len(shown) - 1, n_frames).astype(int):
        bgr = cv2.cvtColor((shown[i] * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(out / "frames" / f"magnified_{i:04d}.png"), bgr)
    view = pulse_view(mag.frames, mask)
    green, magenta = classify_pixels(view, mask)
    for i in np.linspace(0, len(view) - 1, n_frames).astype(int):
        bgr = cv2.cvtColor((view[i] * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(out / "frames" / f"pulse_{i:04d}.png"), bgr)

    t = np.arange(len(clip)) / clip.fps
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(t, green, color="tab:green", label="green")
    ax.plot(t, magenta, color="m", label="magenta")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("pixels")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "pixel_activity.png", dpi=120)
    plt.close(fig)

    pred = pipeline_forward(theta, psi, clip)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(t, pred.samples, label="predicted")
    if ppg_gt is not None:
        g = ppg_gt.samples
        ax.plot(t, (g - g.mean()) / (g.std() or 1.0), alpha=0.7, label="ground truth")
    ax.set_xlabel("time (s)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "signals.png", dpi=120)
    plt.close(fig)

    green_sig = PulseSignal(green.astype(np.float64), clip.fps)
    green_hr = estimate_hr(bandpass(green_sig, grid), grid) if green.std() > 0 else float("nan")
    return {"green": green, "magenta": magenta, "green_hr": green_hr,
            "pred_hr": estimate_hr(bandpass(pred, grid), grid), "magnified": mag}
