"""Spectral and temporal primitives for pulse signals.

Everything here is a pure function. The spectral estimator is a Hann-windowed
DFT evaluated directly on a fixed BPM grid, so the same code path serves the
numpy helpers and the differentiable frequency loss (see :func:`dft_power`).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import uniform_filter1d

from .errors import ConfigError, NoDominantFrequencyError, SignalTooShortError

log = logging.getLogger(__name__)

MIN_BANDPASS_LEN = 30
MIN_SPECTRUM_LEN = 60
SNR_HALF_WIDTH_HZ = 0.1
DETREND_SECONDS = 2.0


@dataclass(frozen=True)
class PulseSignal:
    samples: np.ndarray
    fs: float
    flags: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 2:
            raise ValueError(f"PulseSignal needs a 1-D sequence of length >= 2, got shape {x.shape}")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(x)):
            raise ValueError("PulseSignal samples must be finite")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs

    def to_csv(self, path, column: str = "value") -> None:
        t = np.arange(len(self)) / self.fs
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_sec", column])
            for ti, v in zip(t, self.samples):
                w.writerow([repr(float(ti)), repr(float(v))])

    @classmethod
    def from_csv(cls, path, fs: float | None = None) -> "PulseSignal":
        """Read a ``t_sec,<value>`` CSV. fs is inferred from the time column unless given."""
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        t, v = data[:, 0], data[:, 1]
        if fs is None:
            dt = np.median(np.diff(t))
            fs = 1.0 / dt
        return cls(v, fs)


@dataclass(frozen=True)
class Spectrum:
    freqs: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        if len(self.freqs) != len(self.power):
            raise ValueError("freqs and power must have equal length")

    @property
    def bpm(self) -> np.ndarray:
        return self.freqs * 60.0


@dataclass(frozen=True)
class FrequencyGrid:
    """Band limits in Hz plus the BPM bin spacing.

    Bins sit on multiples of ``bin_bpm`` inside ``[lo, hi]``; with the defaults
    that is 40, 41, ..., 180 BPM (141 bins).
    """

    lo: float = 0.66
    hi: float = 3.0
    bin_bpm: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"grid lo ({self.lo}) must be below hi ({self.hi})")
        if not self.bin_bpm > 0:
            raise ConfigError(f"bin_bpm must be positive, got {self.bin_bpm}")
        if self.bpm.size == 0:
            raise ConfigError("frequency grid is empty")

    @property
    def bpm(self) -> np.ndarray:
        # rounding guards against 0.66*60 = 39.6000000001 style noise
        first = math.ceil(round(self.lo * 60.0 / self.bin_bpm, 9))
        last = math.floor(round(self.hi * 60.0 / self.bin_bpm, 9))
        return np.arange(first, last + 1, dtype=np.float64) * self.bin_bpm

    @property
    def hz(self) -> np.ndarray:
        return self.bpm / 60.0

    @property
    def n_bins(self) -> int:
        return self.bpm.size

    def bin_index(self, bpm: float) -> int:
        """Index of the grid bin nearest to ``bpm``; raises if outside the band."""
        if not (self.lo * 60.0 - 1e-9 <= bpm <= self.hi * 60.0 + 1e-9):
            raise ConfigError(f"HR {bpm:.2f} BPM outside band [{self.lo * 60:.1f}, {self.hi * 60:.1f}]")
        return int(np.argmin(np.abs(self.bpm - bpm)))


DEFAULT_GRID = FrequencyGrid()


def _check_fs(fs: float, grid: FrequencyGrid) -> None:
    if not fs > 2.0 * grid.hi:
        raise ConfigError(f"sampling rate {fs} Hz too low for band edge {grid.hi} Hz")


def dft_basis(n: int, fs: float, grid: FrequencyGrid, dtype=torch.float64):
    """Hann-weighted cosine/sine bases of shape (n_bins, n), normalised by sum(w^2)."""
    t = np.arange(n, dtype=np.float64) / fs
    w = np.hanning(n) if n > 1 else np.ones(1)
    arg = 2.0 * np.pi * np.outer(grid.hz, t)
    scale = 1.0 / math.sqrt(np.sum(w ** 2))
    cos = torch.from_numpy(np.cos(arg) * w * scale).to(dtype)
    sin = torch.from_numpy(np.sin(arg) * w * scale).to(dtype)
    return cos, sin


def dft_power(x: torch.Tensor, fs: float, grid: FrequencyGrid = DEFAULT_GRID) -> torch.Tensor:
    """Differentiable band power of ``x`` (..., T) on the grid bins -> (..., n_bins)."""
    _check_fs(fs, grid)
    cos, sin = dft_basis(x.shape[-1], fs, grid, dtype=x.dtype)
    xc = x - x.mean(dim=-1, keepdim=True)
    re = xc @ cos.T
    im = xc @ sin.T
    return re * re + im * im


def power_spectrum(sig: PulseSignal, grid: FrequencyGrid = DEFAULT_GRID) -> Spectrum:
    if len(sig) < MIN_SPECTRUM_LEN:
        raise SignalTooShortError(f"power spectrum needs >= {MIN_SPECTRUM_LEN} samples, got {len(sig)}")
    p = dft_power(torch.from_numpy(sig.samples), sig.fs, grid).numpy()
    return Spectrum(grid.hz.copy(), np.maximum(p, 0.0))


def estimate_hr(sig: PulseSignal, grid: FrequencyGrid = DEFAULT_GRID) -> float:
    """Heart rate in BPM at the band-limited spectral peak (lowest bin on ties)."""
    spec = power_spectrum(sig, grid)
    if not np.any(spec.power > 0):
        raise NoDominantFrequencyError("spectrum is all zero; no dominant frequency")
    return float(grid.bpm[int(np.argmax(spec.power))])


def bandpass(sig: PulseSignal, grid: FrequencyGrid = DEFAULT_GRID) -> PulseSignal:
    """Zero-phase band-pass: keep DFT bins with lo <= f <= hi, drop the rest.

    A hard spectral mask is idempotent, so already band-limited content passes
    through unchanged.
    """
    if len(sig) < MIN_BANDPASS_LEN:
        raise SignalTooShortError(f"band-pass needs >= {MIN_BANDPASS_LEN} samples, got {len(sig)}")
    _check_fs(sig.fs, grid)
    n = len(sig)
    spec = np.fft.rfft(sig.samples)
    f = np.fft.rfftfreq(n, d=1.0 / sig.fs)
    spec[(f < grid.lo) | (f > grid.hi)] = 0.0
    return PulseSignal(np.fft.irfft(spec, n=n), sig.fs)


def snr_db(sig: PulseSignal, hr_gt: float, grid: FrequencyGrid = DEFAULT_GRID) -> float:
    """Power near the fundamental and first harmonic versus the rest of the band, in dB.

    Returns ``inf`` (and logs a warning) when no out-of-window power remains.
    """
    grid.bin_index(hr_gt)
    spec = power_spectrum(sig, grid)
    f0 = hr_gt / 60.0
    in_win = (np.abs(spec.freqs - f0) <= SNR_HALF_WIDTH_HZ + 1e-12) | (
        np.abs(spec.freqs - 2 * f0) <= SNR_HALF_WIDTH_HZ + 1e-12
    )
    p_in = float(spec.power[in_win].sum())
    p_out = float(spec.power[~in_win].sum())
    if p_out <= 0.0:
        log.warning("snr_db: no out-of-window power, returning +inf")
        return math.inf
    if p_in <= 0.0:
        return -math.inf
    return 10.0 * math.log10(p_in / p_out)


def normalize(sig: PulseSignal) -> PulseSignal:
    x = sig.samples
    sd = x.std()
    if sd == 0:
        return PulseSignal(np.zeros_like(x), sig.fs, flags=("zero_variance",))
    return PulseSignal((x - x.mean()) / sd, sig.fs)


def valid_slices(n: int, k: int) -> tuple[slice, slice]:
    """Slices (pred_idx, gt_idx) pairing pred[t] with gt[t - k] where both exist."""
    if abs(k) >= n:
        raise ValueError(f"|shift| {abs(k)} must be below length {n}")
    if k >= 0:
        return slice(k, n), slice(0, n - k)
    return slice(0, n + k), slice(-k, n)


def shift(sig: PulseSignal, k: int) -> PulseSignal:
    """gt delayed by ``k`` frames, restricted to the overlap region (length T - |k|)."""
    _, src = valid_slices(len(sig), k)
    return PulseSignal(sig.samples[src], sig.fs)


def mse(a, b) -> float:
    a = a.samples if isinstance(a, PulseSignal) else np.asarray(a, dtype=np.float64)
    b = b.samples if isinstance(b, PulseSignal) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse needs equal lengths, got {a.shape} and {b.shape}")
    return float(np.mean((a - b) ** 2))


def denoise_ppg(raw: PulseSignal, grid: FrequencyGrid = DEFAULT_GRID) -> PulseSignal:
    """Moving-average detrend (2 s), band-pass, then z-score.

    The detrend wraps around the clip ends so that, together with the spectral
    band mask, the whole chain stays circular and a clean in-band periodic
    signal is returned as its own z-score.
    """
    if len(raw) < MIN_SPECTRUM_LEN:
        raise SignalTooShortError(f"denoise_ppg needs >= {MIN_SPECTRUM_LEN} samples, got {len(raw)}")
    x = raw.samples
    if np.ptp(x) == 0:
        log.warning("denoise_ppg: zero-variance input")
        return PulseSignal(np.zeros_like(x), raw.fs, flags=("zero_variance",))
    # odd length keeps the centred average free of a half-sample phase lag
    win = int(round(DETREND_SECONDS * raw.fs)) // 2 * 2 + 1
    trend = uniform_filter1d(x, size=win, mode="wrap")
    filtered = bandpass(PulseSignal(x - trend, raw.fs), grid)
    out = normalize(filtered)
    if out.flags:
        log.warning("denoise_ppg: nothing left in band")
    return out
