"""Tests for denvoc.dsp: STFT/iSTFT, mel filterbank, phase algebra."""

import numpy as np
import pytest

from denvoc import dsp
from denvoc.dsp import (
    ENHANCER_STFT,
    PREDICTOR_STFT,
    MelSpectrogram,
    SpectralPair,
    StftConfig,
    Waveform,
)
from denvoc.errors import ConfigurationError

RNG = np.random.default_rng(1234)

BOTH_CONFIGS = [PREDICTOR_STFT, ENHANCER_STFT]


def _sliding_window_frame_oracle(n_samples: int, cfg: StftConfig) -> int:
    """Count frames by literally sliding a window over the padded signal."""
    padded = n_samples + 2 * (cfg.n_fft // 2)
    count = 0
    start = 0
    while start + cfg.n_fft <= padded:
        count += 1
        start += cfg.hop_length
    return count


# ---------------------------------------------------------------------------
# StftConfig / Waveform / SpectralPair invariants
# ---------------------------------------------------------------------------


class TestTypes:
    def test_config_ordering_enforced(self):
        with pytest.raises(ConfigurationError):
            StftConfig(n_fft=256, win_length=512, hop_length=64)
        with pytest.raises(ConfigurationError):
            StftConfig(n_fft=512, win_length=256, hop_length=512)

    def test_config_bins(self):
        assert PREDICTOR_STFT.bins == 513
        assert ENHANCER_STFT.bins == 201

    def test_waveform_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            Waveform(np.array([0.0, np.nan]), 16000)

    def test_waveform_rejects_empty_and_stereo(self):
        with pytest.raises(ValueError):
            Waveform(np.zeros((0,)), 16000)
        with pytest.raises(ValueError, match="mono"):
            Waveform(np.zeros((10, 2)), 16000)

    def test_spectral_pair_rejects_negative_amplitude(self):
        amp = np.ones((4, PREDICTOR_STFT.bins))
        amp[0, 0] = -1e-3
        with pytest.raises(ValueError, match="non-negative"):
            SpectralPair(amp, np.zeros_like(amp), PREDICTOR_STFT)

    def test_spectral_pair_rejects_out_of_range_phase(self):
        amp = np.ones((4, PREDICTOR_STFT.bins))
        phase = np.zeros_like(amp)
        phase[1, 1] = -np.pi  # principal interval is half-open at -pi
        with pytest.raises(ValueError, match="principal"):
            SpectralPair(amp, phase, PREDICTOR_STFT)

    def test_spectral_pair_rejects_shape_mismatch(self):
        amp = np.ones((4, PREDICTOR_STFT.bins))
        with pytest.raises(ValueError):
            SpectralPair(amp, np.zeros((5, PREDICTOR_STFT.bins)), PREDICTOR_STFT)


# ---------------------------------------------------------------------------
# STFT analysis
# ---------------------------------------------------------------------------


class TestStft:
    def test_frame_count_16000_samples(self):
        w = Waveform(RNG.standard_normal(16000), 16000)
        s = dsp.stft(w, PREDICTOR_STFT)
        assert s.frames == 201
        assert s.frames == _sliding_window_frame_oracle(16000, PREDICTOR_STFT)

    @pytest.mark.parametrize("n", [1, 79, 80, 81, 1000, 4096, 12345])
    @pytest.mark.parametrize("cfg", BOTH_CONFIGS, ids=["1024/320/80", "400/400/100"])
    def test_frame_count_matches_oracle(self, n, cfg):
        w = Waveform(RNG.standard_normal(n), 16000)
        s = dsp.stft(w, cfg)
        assert s.frames == _sliding_window_frame_oracle(n, cfg)
        assert s.frames == dsp.frame_count(n, cfg)

    def test_zero_signal_zero_amp_zero_phase(self):
        w = Waveform(np.zeros(4000), 16000)
        s = dsp.stft(w, PREDICTOR_STFT)
        assert np.all(s.amplitude == 0)
        assert np.all(s.phase == 0)

    def test_sine_peak_bin_matches_dense_dft_oracle(self):
        sr, f = 16000, 1000.0
        t = np.arange(sr) / sr
        w = Waveform(0.5 * np.sin(2 * np.pi * f * t), sr)
        s = dsp.stft(w, PREDICTOR_STFT)

        # dense DFT of one windowed interior frame, evaluated bin by bin
        cfg = PREDICTOR_STFT
        frame_idx = 100
        center = frame_idx * cfg.hop_length
        seg = w.samples[center - cfg.win_length // 2 : center + cfg.win_length // 2]
        windowed = seg * cfg.window_array()
        n = np.arange(cfg.win_length)
        mags = [
            abs(np.sum(windowed * np.exp(-2j * np.pi * k * n / cfg.n_fft)))
            for k in range(cfg.bins)
        ]
        oracle_peak = int(np.argmax(mags))
        assert oracle_peak == 64  # 1000 Hz * 1024 / 16000

        interior = s.amplitude[5:-5]
        assert np.all(np.argmax(interior, axis=1) == oracle_peak)

    def test_rejects_nonfinite_samples(self):
        w = Waveform(np.zeros(1000), 16000)
        w.samples[5] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            dsp.stft(w, PREDICTOR_STFT)

    def test_single_sample_signal(self):
        s = dsp.stft(Waveform(np.array([0.25]), 16000), PREDICTOR_STFT)
        assert s.frames == 1


# ---------------------------------------------------------------------------
# iSTFT synthesis
# ---------------------------------------------------------------------------


class TestIstft:
    @pytest.mark.parametrize("cfg", BOTH_CONFIGS, ids=["1024/320/80", "400/400/100"])
    def test_round_trip_random_noise(self, cfg):
        x = RNG.standard_normal(16000)
        w = Waveform(x, 16000)
        y = dsp.istft(dsp.stft(w, cfg), length=len(w))
        assert np.max(np.abs(y.samples - x)) < 1e-4

    def test_zero_spectrum_zero_waveform(self):
        amp = np.zeros((50, ENHANCER_STFT.bins))
        s = SpectralPair(amp, np.zeros_like(amp), ENHANCER_STFT)
        y = dsp.istft(s)
        assert np.all(y.samples == 0)
        assert len(y) == 49 * ENHANCER_STFT.hop_length

    def test_round_trip_speech_clip_hits_ssnr_cap(self, speech_1s):
        from denvoc import metrics

        y = dsp.istft(dsp.stft(speech_1s, PREDICTOR_STFT), length=len(speech_1s))
        assert metrics.ssnr(speech_1s, y) > 35 - 1e-9

    def test_output_length_without_hint(self):
        w = Waveform(RNG.standard_normal(16000), 16000)
        y = dsp.istft(dsp.stft(w, PREDICTOR_STFT))
        assert len(y) == 16000  # (201 - 1) * 80

    def test_cola_violation_rejected(self):
        bad = StftConfig(n_fft=512, win_length=512, hop_length=512)
        amp = np.ones((10, bad.bins))
        s = SpectralPair(amp, np.zeros_like(amp), bad)
        with pytest.raises(ConfigurationError, match="overlap-add"):
            dsp.istft(s)

    def test_operating_configs_are_cola_flat(self):
        # 75% Hann overlap: the squared-window envelope is constant
        assert dsp.cola_deviation(PREDICTOR_STFT) < 1e-12
        assert dsp.cola_deviation(ENHANCER_STFT) < 1e-12

    @pytest.mark.parametrize(
        "cfg",
        [
            PREDICTOR_STFT,
            ENHANCER_STFT,
            StftConfig(n_fft=512, win_length=256, hop_length=128),
            StftConfig(n_fft=2048, win_length=1024, hop_length=256),
        ],
    )
    def test_round_trip_any_invertible_config(self, cfg):
        dsp.validate_synthesis(cfg)
        x = RNG.standard_normal(11173)  # deliberately not a hop multiple
        w = Waveform(x, 16000)
        y = dsp.istft(dsp.stft(w, cfg), length=len(w))
        assert np.max(np.abs(y.samples - x)) < 1e-4


# ---------------------------------------------------------------------------
# Mel spectrogram
# ---------------------------------------------------------------------------


class TestMel:
    def test_shape_propagation(self, speech_1s):
        mel = dsp.mel_spectrogram(speech_1s, PREDICTOR_STFT)
        assert mel.values.shape == (201, 80)

    def test_zero_waveform_gives_log_eps(self):
        mel = dsp.mel_spectrogram(Waveform(np.zeros(8000), 16000), PREDICTOR_STFT)
        assert np.allclose(mel.values, np.log(1e-5))

    def test_filterbank_rows_positive_and_columns_covered(self):
        fb = dsp.mel_filterbank(16000, 1024, 80, 0.0, 8000.0)
        assert fb.shape == (80, 513)
        assert np.all(fb.sum(axis=1) > 0)
        freqs = np.linspace(0, 8000, 513)
        inside = (freqs > 50) & (freqs < 7900)  # clear of the edge ramps
        assert np.all(fb.sum(axis=0)[inside] > 0)

    def test_rejects_bad_band_count_and_range(self):
        with pytest.raises(ConfigurationError):
            dsp.mel_filterbank(16000, 1024, 0)
        with pytest.raises(ConfigurationError):
            dsp.mel_filterbank(16000, 1024, 80, f_min=5000, f_max=4000)
        with pytest.raises(ConfigurationError):
            dsp.mel_filterbank(16000, 1024, 80, f_min=0, f_max=9000)

    def test_shift_covariance_at_hop_granularity(self, speech_1s):
        cfg = PREDICTOR_STFT
        mel = dsp.mel_spectrogram(speech_1s, cfg)
        delayed = Waveform(
            np.concatenate([np.zeros(cfg.hop_length), speech_1s.samples]),
            speech_1s.sample_rate,
        )
        mel_d = dsp.mel_spectrogram(delayed, cfg)
        margin = -(-cfg.n_fft // cfg.hop_length)  # frames touched by padding
        a = mel.values[margin : mel.frames - margin]
        b = mel_d.values[margin + 1 : mel.frames - margin + 1]
        assert np.allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------------------
# Phase wrapping and noisy-phase composition
# ---------------------------------------------------------------------------


class TestWrapPhase:
    def test_conventions(self):
        out = dsp.wrap_phase([0.0, 2 * np.pi, -np.pi, 3 * np.pi])
        assert out[0] == 0.0
        assert abs(out[1]) < 1e-12
        assert out[2] == pytest.approx(np.pi)
        assert out[3] == pytest.approx(np.pi)

    def test_idempotent(self):
        x = RNG.uniform(-50, 50, size=1000)
        once = dsp.wrap_phase(x)
        assert np.array_equal(dsp.wrap_phase(once), once)

    def test_congruence_mod_2pi(self):
        x = RNG.uniform(-20, 20, size=500)
        out = dsp.wrap_phase(x)
        assert np.all(out > -np.pi) and np.all(out <= np.pi)
        k = np.round((x - out) / (2 * np.pi))
        assert np.allclose(out + 2 * np.pi * k, x, atol=1e-9)


class TestComposeNoisyPhase:
    def _random_pair(self, frames=10, seed=0):
        rng = np.random.default_rng(seed)
        bins = PREDICTOR_STFT.bins
        amp = rng.uniform(0, 2, size=(frames, bins))
        phase = dsp.wrap_phase(rng.uniform(-np.pi, np.pi, size=(frames, bins)))
        return SpectralPair(amp, phase, PREDICTOR_STFT)

    def test_zero_noise_returns_clean_phase_exactly(self):
        clean = self._random_pair(seed=1)
        noise = SpectralPair(
            np.zeros_like(clean.amplitude), np.zeros_like(clean.phase), PREDICTOR_STFT
        )
        out = dsp.compose_noisy_phase(clean, noise)
        assert np.array_equal(out.phase, clean.phase)
        assert np.allclose(out.amplitude, clean.amplitude)

    def test_unit_quadrature_case(self):
        bins = PREDICTOR_STFT.bins
        clean = SpectralPair(np.ones((2, bins)), np.zeros((2, bins)), PREDICTOR_STFT)
        noise = SpectralPair(
            np.ones((2, bins)), np.full((2, bins), np.pi / 2), PREDICTOR_STFT
        )
        out = dsp.compose_noisy_phase(clean, noise)
        assert np.allclose(out.phase, np.pi / 4, atol=1e-12)
        assert np.allclose(out.amplitude, np.sqrt(2), atol=1e-12)

    def test_matches_complex_arithmetic_oracle(self):
        clean = self._random_pair(frames=2, seed=2)
        noise = self._random_pair(frames=2, seed=3)
        out = dsp.compose_noisy_phase(clean, noise)
        oracle = clean.to_complex() + noise.to_complex()
        assert np.max(np.abs(out.amplitude - np.abs(oracle))) < 1e-9
        diff = dsp.wrap_phase(out.phase - np.angle(oracle))
        assert np.max(np.abs(diff)) < 1e-9

    def test_shape_mismatch_rejected(self):
        clean = self._random_pair(frames=4)
        noise = self._random_pair(frames=5)
        with pytest.raises(ValueError, match="mismatch"):
            dsp.compose_noisy_phase(clean, noise)

    def test_high_snr_phase_deviation_shrinks_monotonically(self):
        rng = np.random.default_rng(17)
        bins = ENHANCER_STFT.bins
        clean_phase = dsp.wrap_phase(rng.uniform(-np.pi, np.pi, size=(8, bins)))
        noise_phase = dsp.wrap_phase(rng.uniform(-np.pi, np.pi, size=(8, bins)))
        clean = SpectralPair(np.ones((8, bins)), clean_phase, ENHANCER_STFT)
        deviations = []
        for ratio in (0.1, 0.01, 0.001):
            noise = SpectralPair(
                np.full((8, bins), ratio), noise_phase, ENHANCER_STFT
            )
            out = dsp.compose_noisy_phase(clean, noise)
            deviations.append(np.max(np.abs(dsp.wrap_phase(out.phase - clean_phase))))
        assert deviations[0] > deviations[1] > deviations[2]
        assert deviations[2] < 2e-3
