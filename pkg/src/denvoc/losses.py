"""Training objectives shared by the spectrum predictor and the enhancer.

Phase/amplitude losses take spectra laid out ``[..., frames, bins]`` (time on
the second-to-last axis). Everything accepts numpy arrays or torch tensors and
is differentiable when fed tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from . import dsp
from .dsp import SpectralPair, StftConfig
from .errors import ConfigurationError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite generator objective; all must be >= 0."""

    w_mel: float = 45.0
    w_amp: float = 45.0
    w_phase_ip: float = 100.0
    w_phase_gd: float = 100.0
    w_phase_iaf: float = 100.0
    w_complex: float = 45.0
    w_time: float = 1.0  # enhancer stage only
    w_adv: float = 1.0
    w_fm: float = 2.0
    w_metric: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"{f.name} must be finite and >= 0, got {v}")


def _t(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def anti_wrap(x) -> torch.Tensor:
    """Distance to the nearest multiple of 2 pi: ``|x - 2 pi round(x / 2 pi)|``.

    2 pi-periodic, ranges over [0, pi], and has unit gradient magnitude away
    from multiples of pi.
    """
    x = _t(x)
    return torch.abs(x - TWO_PI * torch.round(x / TWO_PI))


def anti_wrap_cosine(x) -> torch.Tensor:
    """Cosine-shaped alternative ``1 - cos(x)``; gradients vanish near 0 and pi."""
    x = _t(x)
    return 1.0 - torch.cos(x)


def phase_losses(pred_phase, true_phase, wrap_fn=anti_wrap):
    """Instantaneous-phase, group-delay and instantaneous-angular-frequency losses.

    ``gd`` compares forward differences along frequency (last axis), ``iaf``
    along time (second-to-last axis); all three are invariant to 2 pi offsets.
    """
    pred, true = _t(pred_phase), _t(true_phase)
    _check_same_shape(pred, true, "phase_losses")
    if pred.shape[-1] < 2 or pred.shape[-2] < 2:
        raise ValueError("phase_losses needs at least 2 frames and 2 bins")
    ip = wrap_fn(pred - true).mean()
    gd = wrap_fn(torch.diff(pred, dim=-1) - torch.diff(true, dim=-1)).mean()
    iaf = wrap_fn(torch.diff(pred, dim=-2) - torch.diff(true, dim=-2)).mean()
    return ip, gd, iaf


def amplitude_loss(pred_logamp, true_logamp) -> torch.Tensor:
    """MSE between log-amplitude spectra."""
    pred, true = _t(pred_logamp), _t(true_logamp)
    _check_same_shape(pred, true, "amplitude_loss")
    return torch.mean((pred - true) ** 2)


def mel_loss(pred_mel, true_mel) -> torch.Tensor:
    """L1 between log-mel spectrograms."""
    pred, true = _t(pred_mel), _t(true_mel)
    _check_same_shape(pred, true, "mel_loss")
    return torch.mean(torch.abs(pred - true))


def time_loss(pred_wav, true_wav) -> torch.Tensor:
    """L1 between waveforms."""
    pred, true = _t(pred_wav), _t(true_wav)
    _check_same_shape(pred, true, "time_loss")
    return torch.mean(torch.abs(pred - true))


def complex_loss(pred_amp, pred_phase, true_amp, true_phase) -> torch.Tensor:
    """MSE over stacked real/imaginary parts of the two spectra."""
    pa, pp, ta, tp = map(_t, (pred_amp, pred_phase, true_amp, true_phase))
    _check_same_shape(pa, ta, "complex_loss")
    pred = torch.stack([pa * torch.cos(pp), pa * torch.sin(pp)])
    true = torch.stack([ta * torch.cos(tp), ta * torch.sin(tp)])
    return torch.mean((pred - true) ** 2)


def consistency_loss(amp, phase, cfg: StftConfig, length: int | None = None) -> torch.Tensor:
    """MSE between a spectrum and the re-analysis of its own synthesis.

    Zero iff ``(amp, phase)`` is a fixed point of iSTFT->STFT, i.e. the pair is
    realizable as the spectrum of some waveform. Inputs are [..., frames, bins].
    """
    a, p = _t(amp), _t(phase)
    _check_same_shape(a, p, "consistency_loss")
    a_bf, p_bf = a.transpose(-1, -2), p.transpose(-1, -2)
    wav = dsp.istft_tensor(a_bf, p_bf, cfg, length=length)
    spec = dsp.stft_complex_tensor(wav, cfg)
    pred = torch.stack([a_bf * torch.cos(p_bf), a_bf * torch.sin(p_bf)])
    reana = torch.stack([spec.real, spec.imag])
    return torch.mean((pred - reana) ** 2)


def complex_and_consistency_loss(pred, true, cfg: StftConfig | None = None,
                                 length: int | None = None) -> torch.Tensor:
    """Real/imag L2 against the target plus the self-consistency penalty.

    ``pred`` and ``true`` are either :class:`SpectralPair` instances or
    ``(amplitude, phase)`` tuples laid out [..., frames, bins] (then ``cfg``
    is required).
    """
    if isinstance(pred, SpectralPair) and isinstance(true, SpectralPair):
        if pred.config != true.config:
            raise ConfigurationError("spectral pairs use different STFT configs")
        cfg = pred.config
        pa, pp = _t(pred.amplitude), _t(pred.phase)
        ta, tp = _t(true.amplitude), _t(true.phase)
    else:
        if cfg is None:
            raise ConfigurationError("cfg is required with raw array inputs")
        pa, pp = _t(pred[0]), _t(pred[1])
        ta, tp = _t(true[0]), _t(true[1])
    return complex_loss(pa, pp, ta, tp) + consistency_loss(pa, pp, cfg, length=length)


def gan_losses(disc_outputs_real, disc_outputs_fake, features_real, features_fake):
    """Least-squares GAN objectives plus L1 feature matching.

    Returns ``(d_loss, g_adv_loss, fm_loss)``: the discriminator drives real
    scores to 1 and fake scores to 0, the generator drives fake scores to 1,
    and feature matching sums mean absolute differences over every
    intermediate activation.
    """
    if len(disc_outputs_real) != len(disc_outputs_fake):
        raise ValueError(
            f"got {len(disc_outputs_real)} real vs {len(disc_outputs_fake)} fake score maps"
        )
    if len(features_real) != len(features_fake):
        raise ValueError(
            f"got {len(features_real)} real vs {len(features_fake)} fake feature stacks"
        )
    d_loss = 0.0
    g_adv = 0.0
    for r, f in zip(disc_outputs_real, disc_outputs_fake):
        r, f = _t(r), _t(f)
        d_loss = d_loss + torch.mean((1.0 - r) ** 2) + torch.mean(f**2)
        g_adv = g_adv + torch.mean((1.0 - f) ** 2)
    fm = 0.0
    for stack_r, stack_f in zip(features_real, features_fake):
        if len(stack_r) != len(stack_f):
            raise ValueError("feature stacks have different depths")
        for fr, ff in zip(stack_r, stack_f):
            fm = fm + torch.mean(torch.abs(_t(fr) - _t(ff)))
    return _t(d_loss), _t(g_adv), _t(fm)


def metric_disc_loss(pred_score, target_metric) -> torch.Tensor:
    """MSE between predicted quality scores and normalized metric targets in [0, 1]."""
    pred, target = _t(pred_score), _t(target_metric)
    _check_same_shape(pred, target, "metric_disc_loss")
    if torch.any(target < 0) or torch.any(target > 1):
        raise ValueError("target metric values must lie in [0, 1]")
    return torch.mean((pred - target) ** 2)
