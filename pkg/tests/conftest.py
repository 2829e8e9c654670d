import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from pulsemag.signal import PulseSignal

settings.register_profile("pulsemag", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pulsemag")


def tone(bpm, T=300, fs=30.0, amp=1.0, phase=0.0):
    t = np.arange(T) / fs
    return amp * np.sin(2 * np.pi * bpm / 60.0 * t + phase)


@pytest.fixture
def make_tone():
    def _make(bpm, T=300, fs=30.0, amp=1.0, phase=0.0):
        return PulseSignal(tone(bpm, T, fs, amp, phase), fs)

    return _make


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    reports = []
    for key in ("passed", "failed", "error"):
        reports += [r for r in terminalreporter.stats.get(key, []) if "test_acceptance.py::test_criterion_" in r.nodeid]
    final = {}
    for r in reports:
        if r.when == "call" or r.outcome != "passed":
            final[r.nodeid] = r
    if not final:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(final):
        r = final[nodeid]
        num = int(nodeid.split("test_criterion_")[1].split("_")[0])
        detail = "; ".join(v for k, v in r.user_properties if k == "detail")
        status = "PASS" if r.outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}")
