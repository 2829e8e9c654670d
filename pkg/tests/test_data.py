import json
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pulsemag.data import (
    SynthConfig,
    ellipse_mask,
    load_manifest,
    load_sample,
    make_dataset,
    render_video,
    split_windows,
    synth_ppg_waveform,
    synth_samples,
    window_clip,
    window_starts,
)
from pulsemag.errors import ConfigError, IngestionError
from pulsemag.signal import PulseSignal, bandpass, denoise_ppg, estimate_hr

SMALL = SynthConfig(T=300, H=32, W=32)


class TestWaveform:
    def test_constant_hr(self):
        assert estimate_hr(synth_ppg_waveform(SynthConfig(hr_bpm=72))) == 72

    def test_ramp_windows_increase(self):
        s = synth_ppg_waveform(SynthConfig(T=900, hr_bpm=60, hr_end_bpm=90))
        hrs = [estimate_hr(PulseSignal(s.samples[i : i + 300], 30.0)) for i in (0, 300, 600)]
        assert hrs[0] < hrs[1] < hrs[2]

    @given(st.floats(0.01, 100))
    def test_amplitude_scaling(self, a):
        s = synth_ppg_waveform(SynthConfig()).samples
        assert np.std(a * s) == pytest.approx(a * np.std(s), rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            SynthConfig(hr_bpm=30)
        with pytest.raises(ConfigError):
            SynthConfig(hr_bpm=100, hr_end_bpm=200)


class TestRender:
    def test_noise_free_green_tracks_ppg(self):
        cfg = SynthConfig(H=32, W=32, noise_std=0.0)
        ppg = synth_ppg_waveform(cfg)
        s = render_video(cfg, ppg)
        g = s.clip.frames[..., 1][:, s.mask].mean(axis=1)
        gb = bandpass(PulseSignal(g.astype(np.float64), 30.0)).samples
        assert np.corrcoef(gb, bandpass(ppg).samples)[0, 1] >= 0.99

    def test_static_without_pulse_or_noise(self):
        cfg = SynthConfig(H=32, W=32, noise_std=0.0, pulse_amplitude=0.0)
        f = render_video(cfg, synth_ppg_waveform(cfg)).clip.frames
        assert np.max(np.abs(np.diff(f, axis=0))) == 0

    def test_mask_discipline_and_range(self):
        s = next(synth_samples(SMALL, 1, seed=0))
        assert np.all(s.clip.frames[:, ~s.mask] == 0)
        assert s.clip.frames.min() >= 0 and s.clip.frames.max() <= 1

    def test_same_seed_identical(self):
        a, b = next(synth_samples(SMALL, 1, seed=4)), next(synth_samples(SMALL, 1, seed=4))
        np.testing.assert_array_equal(a.clip.frames, b.clip.frames)
        np.testing.assert_array_equal(a.ppg_gt.samples, b.ppg_gt.samples)

    def test_motion_moves_mask(self):
        cfg = SynthConfig(H=32, W=32, motion_amp=3.0, motion_hz=0.5, noise_std=0)
        s = render_video(cfg, synth_ppg_waveform(cfg))
        occ = s.clip.frames[..., 0] > 0
        assert not np.array_equal(occ[0], occ[15])

    def test_empty_mask_rejected(self):
        cfg = SynthConfig(H=32, W=32, mask_axes=(0.001, 0.001))
        assert not ellipse_mask(cfg).any()
        with pytest.raises(ConfigError, match="empty"):
            render_video(cfg, synth_ppg_waveform(cfg))

    def test_gt_consistency(self):
        for s in synth_samples(SMALL, 4, seed=2):
            for w in window_clip(s, 300, 0):
                assert abs(estimate_hr(denoise_ppg(w.ppg_gt)) - w.hr_gt[0]) <= 1.0


class TestDataset:
    def test_make_dataset(self, tmp_path):
        m = make_dataset(SMALL, 8, 0, tmp_path / "a")
        assert len(m.records) == 8 and len(set(m.subjects)) == 8
        assert all(55 <= r["hr_bpm"] <= 95 for r in m.records)
        make_dataset(SMALL, 8, 0, tmp_path / "b")
        a = json.loads((tmp_path / "a/manifest.json").read_text())
        b = json.loads((tmp_path / "b/manifest.json").read_text())
        assert a == b
        for r in a["records"]:
            assert (tmp_path / "a" / r["gt"]).read_bytes() == (tmp_path / "b" / r["gt"]).read_bytes()

    def test_round_trip_quantization(self, tmp_path):
        src = next(synth_samples(SMALL, 1, seed=0))
        m = make_dataset(SMALL, 1, 0, tmp_path)
        s = load_sample(m.records[0], m)
        assert np.max(np.abs(s.clip.frames - src.clip.frames)) <= 1 / 255 + 1e-6
        assert s.subject == src.subject and s.mask.sum() == src.mask.sum()

    def test_resample_256hz(self, tmp_path):
        m = make_dataset(SMALL, 1, 0, tmp_path)
        rec = m.records[0]
        t = np.arange(int(10 * 256)) / 256
        with open(m.path_of(rec["gt"]), "w") as fh:
            fh.write("t_sec,ppg\n")
            for ti in t:
                fh.write(f"{float(ti)!r},{float(np.sin(2 * np.pi * 1.2 * ti))!r}\n")
        s = load_sample(rec, m)
        assert len(s.ppg_gt) == 300 and estimate_hr(s.ppg_gt) == 72

    def test_length_mismatch(self, tmp_path):
        m = make_dataset(SMALL, 1, 0, tmp_path)
        rec = m.records[0]
        lines = m.path_of(rec["gt"]).read_text().splitlines()
        m.path_of(rec["gt"]).write_text("\n".join(lines[:200]) + "\n")
        with pytest.raises(IngestionError, match="gt.csv"):
            load_sample(rec, m)

    def test_missing_mask_fallback(self, tmp_path, caplog):
        m = make_dataset(SMALL, 1, 0, tmp_path)
        rec = {k: v for k, v in m.records[0].items() if k != "mask"}
        with caplog.at_level(logging.WARNING):
            s = load_sample(rec, m)
        assert s.mask.all() and "no mask" in caplog.text

    def test_missing_file(self, tmp_path):
        m = make_dataset(SMALL, 1, 0, tmp_path)
        (tmp_path / m.records[0]["gt"]).unlink()
        with pytest.raises(IngestionError, match="gt.csv"):
            load_manifest(tmp_path)

    def test_resize_to_manifest_size(self, tmp_path):
        make_dataset(SynthConfig(H=64, W=64), 1, 0, tmp_path)
        m = load_manifest(tmp_path)
        m.size = 32
        assert load_sample(m.records[0], m).clip.shape == (300, 32, 32, 3)


class TestWindows:
    def test_training_stride(self):
        assert window_starts(900, 300, 10) == [0, 290, 580]

    def test_eval_stride(self):
        assert window_starts(900, 300, 0) == [0, 300, 600]

    def test_too_short(self):
        with pytest.raises(ConfigError):
            window_starts(299, 300, 0)

    @given(st.integers(300, 2000), st.integers(0, 50))
    def test_partition_properties(self, T, ov):
        starts = window_starts(T, 300, ov)
        assert starts[0] == 0 and starts[-1] + 300 <= T
        assert all(b - a == 300 - ov for a, b in zip(starts, starts[1:]))
        assert T - (starts[-1] + 300) < 300 - ov  # only a partial trailing window is dropped

    def test_window_samples(self):
        s = next(synth_samples(SynthConfig(T=600, H=32, W=32), 1, seed=0))
        ws = split_windows([s], 300, 0)
        assert len(ws) == 2 and all(len(w.clip) == 300 and len(w.ppg_gt) == 300 for w in ws)
        np.testing.assert_array_equal(ws[1].clip.frames, s.clip.frames[300:])
