"""Tests for the stage-1 amplitude/phase predictor."""

import numpy as np
import pytest
import torch

from denvoc import dsp, losses
from denvoc.dsp import PREDICTOR_STFT, MelSpectrogram, Waveform
from denvoc.errors import ConfigurationError
from denvoc.spectrum_predictor import (
    PredictorConfig,
    PredictorOutput,
    SpectrumPredictor,
    predictor_forward,
    predictor_reconstruct,
)

TINY = PredictorConfig(
    hidden_channels=16,
    n_resblocks=1,
    resblock_kernel_sizes=(3,),
    resblock_dilations=(1,),
)


def _model(cfg=None, seed=0) -> SpectrumPredictor:
    torch.manual_seed(seed)
    return SpectrumPredictor(cfg or TINY)


class TestConfig:
    def test_toy_preset(self):
        cfg = PredictorConfig.toy()
        assert cfg.hidden_channels == 128 and cfg.n_resblocks == 4

    def test_invalid_backbone_rejected(self):
        with pytest.raises(ConfigurationError):
            PredictorConfig(backbone="transformer")

    def test_receptive_field_formula(self):
        # input conv (3) + one k=3 block with dilation 1 (1*(1+1)=2) + out conv (3)
        assert TINY.receptive_field() == 8


class TestForward:
    def test_shape_preservation(self):
        model = _model()
        mel = torch.randn(201, 80).T
        log_amp, phase = model(mel)
        assert log_amp.shape == (513, 201)
        assert phase.shape == (513, 201)

    def test_batched_shapes(self):
        model = _model()
        log_amp, phase = model(torch.randn(3, 80, 64))
        assert log_amp.shape == (3, 513, 64) and phase.shape == (3, 513, 64)

    @pytest.mark.parametrize("frames", [1, 2, 3, 5, 9, 17, 33, 64, 121, 200, 256])
    def test_frame_preservation_across_lengths(self, frames):
        model = _model()
        log_amp, phase = model(torch.randn(80, frames))
        assert log_amp.shape[-1] == frames and phase.shape[-1] == frames

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_phase_in_principal_interval_for_arbitrary_params(self, seed):
        model = _model(seed=seed)
        with torch.no_grad():
            for p in model.parameters():  # exaggerate weights; range must still hold
                p.mul_(torch.randn(()) * 5)
        _, phase = model(torch.randn(80, 40) * 10)
        assert torch.all(phase > -np.pi) and torch.all(phase <= np.pi)

    def test_band_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mel bands"):
            _model()(torch.randn(64, 40))

    def test_determinism_same_seed_same_output(self):
        x = torch.randn(80, 50)
        out_a = _model(seed=5)(x)
        out_b = _model(seed=5)(x)
        assert torch.equal(out_a[0], out_b[0]) and torch.equal(out_a[1], out_b[1])

    def test_convnext_backbone_variant(self):
        cfg = PredictorConfig(hidden_channels=16, n_resblocks=2, backbone="convnext_v2")
        model = _model(cfg)
        log_amp, phase = model(torch.randn(80, 30))
        assert log_amp.shape == (513, 30)
        assert torch.all(phase > -np.pi) and torch.all(phase <= np.pi)

    def test_perturbation_confined_to_receptive_field(self):
        model = _model()
        model.eval()
        frames = 64
        x = torch.randn(80, frames)
        with torch.no_grad():
            base_amp, base_phase = model(x)
            x2 = x.clone()
            x2[:, 32] += 1.0
            amp2, phase2 = model(x2)
        changed = (
            ((base_amp - amp2).abs().sum(dim=0) > 1e-9)
            | ((base_phase - phase2).abs().sum(dim=0) > 1e-9)
        ).numpy()
        r = model.cfg.receptive_field()
        outside = np.concatenate([changed[: 32 - r], changed[32 + r + 1 :]])
        assert not outside.any()
        assert changed[32]  # the perturbed frame itself responds

    def test_gradient_reaches_every_parameter_group(self):
        model = _model()
        mel = torch.randn(2, 80, 40)
        log_amp, phase = model(mel)
        target_amp = torch.randn_like(log_amp)
        target_phase = dsp.wrap_phase_tensor(torch.randn_like(phase))
        loss = losses.amplitude_loss(log_amp, target_amp)
        ip, gd, iaf = losses.phase_losses(
            phase.transpose(-1, -2), target_phase.transpose(-1, -2)
        )
        (loss + ip + gd + iaf).backward()
        for name, group in (
            ("asp", model.asp), ("asp_out", model.asp_out),
            ("psp", model.psp), ("psp_out_r", model.psp_out_r),
            ("psp_out_i", model.psp_out_i),
        ):
            total = sum(
                p.grad.abs().sum().item() for p in group.parameters() if p.grad is not None
            )
            assert total > 0, f"no gradient in {name}"


class TestFunctionalWrappers:
    def test_predictor_forward_layout(self, speech_1s):
        mel = dsp.mel_spectrogram(speech_1s, PREDICTOR_STFT)
        out = predictor_forward(mel, _model())
        assert out.log_amplitude.shape == (mel.frames, 513)
        assert np.all(out.phase > -np.pi) and np.all(out.phase <= np.pi)

    def test_ground_truth_bypass_round_trip(self, speech_1s):
        pair = dsp.stft(speech_1s, PREDICTOR_STFT)
        out = PredictorOutput(
            log_amplitude=np.log(np.maximum(pair.amplitude, 1e-12)), phase=pair.phase
        )
        wav = predictor_reconstruct(out, PREDICTOR_STFT, length=len(speech_1s))
        assert np.max(np.abs(wav.samples - speech_1s.samples)) < 1e-4

    def test_unit_amp_linear_phase_gives_reproducible_comb(self):
        # linear phase centers each frame's impulse inside the window support
        k = np.arange(513)
        ramp = dsp.wrap_phase(-2 * np.pi * k * (PREDICTOR_STFT.n_fft // 2) / 1024)
        out = PredictorOutput(
            log_amplitude=np.zeros((40, 513)), phase=np.tile(ramp, (40, 1))
        )
        a = predictor_reconstruct(out, PREDICTOR_STFT)
        b = predictor_reconstruct(out, PREDICTOR_STFT)
        assert np.array_equal(a.samples, b.samples)
        assert np.max(np.abs(a.samples)) > 0  # comb-like, not silence

    def test_config_mismatch_rejected(self):
        out = PredictorOutput(
            log_amplitude=np.zeros((10, 513)), phase=np.zeros((10, 513))
        )
        with pytest.raises(ConfigurationError, match="bins"):
            predictor_reconstruct(out, dsp.ENHANCER_STFT)

    def test_band_count_mismatch_in_wrapper(self):
        mel = MelSpectrogram(values=np.zeros((10, 64)), config=PREDICTOR_STFT, n_mels=64)
        with pytest.raises(ValueError, match="mel bands"):
            predictor_forward(mel, _model())
