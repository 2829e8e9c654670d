"""Pulse-signal magnification for rPPG on compressed video.

A temporal-derivative estimator recovers the pulse from face video; a 3D U-Net
magnifier, trained against the frozen estimator on compressed clips, restores
pulse information the codec removed.
"""
from .errors import PulseMagError
from .signal import DEFAULT_GRID, FrequencyGrid, PulseSignal, bandpass, estimate_hr, snr_db

__version__ = "0.1.0"

__all__ = ["DEFAULT_GRID", "FrequencyGrid", "PulseMagError", "PulseSignal", "bandpass", "estimate_hr", "snr_db"]
