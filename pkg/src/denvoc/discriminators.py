"""Adversarial critics: multi-period + multi-resolution (default) waveform
discriminators, the legacy multi-scale variant for the ablation, and the
quality-score discriminator used by the enhancement stage.

All spectral views are computed through :mod:`denvoc.dsp`; discriminators are
training-time only and never ship for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm, weight_norm

from . import dsp
from .dsp import StftConfig
from .errors import ConfigurationError

LRELU_SLOPE = 0.1


@dataclass(frozen=True)
class DiscriminatorSuiteConfig:
    periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    # (n_fft, hop_length, win_length) triples
    resolutions: tuple[tuple[int, int, int], ...] = (
        (512, 128, 512),
        (1024, 256, 1024),
        (2048, 512, 2048),
    )
    variant: str = "mrd"  # "mrd" | "msd"
    sample_rate: int = 16000

    def __post_init__(self):
        if len(set(self.periods)) != len(self.periods):
            raise ConfigurationError("periods must be pairwise distinct")
        if self.variant not in ("mrd", "msd"):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        for n_fft, hop, win in self.resolutions:
            StftConfig(n_fft=n_fft, win_length=win, hop_length=hop,
                       sample_rate=self.sample_rate)

    def as_dict(self) -> dict:
        return {
            "periods": list(self.periods),
            "resolutions": [list(r) for r in self.resolutions],
            "variant": self.variant,
            "sample_rate": self.sample_rate,
        }


def _as_batched(wav: torch.Tensor) -> torch.Tensor:
    if wav.dim() == 1:
        return wav.unsqueeze(0)
    if wav.dim() == 3:  # [B, 1, T]
        return wav.squeeze(1)
    return wav


class PeriodDiscriminator(nn.Module):
    """Scores a waveform folded into a [T / period, period] image."""

    def __init__(self, period, channels=(32, 128, 512, 1024)):
        super().__init__()
        self.period = period
        convs = []
        in_ch = 1
        for ch in channels:
            convs.append(weight_norm(nn.Conv2d(in_ch, ch, (5, 1), (3, 1), padding=(2, 0))))
            in_ch = ch
        convs.append(weight_norm(nn.Conv2d(in_ch, 1024, (5, 1), padding=(2, 0))))
        self.convs = nn.ModuleList(convs)
        self.conv_post = weight_norm(nn.Conv2d(1024, 1, (3, 1), padding=(1, 0)))

    def forward(self, x):  # [B, T]
        b, t = x.shape
        if t % self.period:
            pad = self.period - t % self.period
            x = F.pad(x, (0, pad), mode="reflect" if t > pad else "constant")
            t = t + pad
        x = x.view(b, 1, t // self.period, self.period)
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            features.append(x)
        x = self.conv_post(x)
        features.append(x)
        return torch.flatten(x, 1), features


class ResolutionDiscriminator(nn.Module):
    """Scores the amplitude spectrogram at one STFT resolution."""

    def __init__(self, resolution, sample_rate=16000, channels=32):
        super().__init__()
        n_fft, hop, win = resolution
        self.stft_cfg = StftConfig(
            n_fft=n_fft, win_length=win, hop_length=hop, sample_rate=sample_rate
        )
        c = channels
        self.convs = nn.ModuleList(
            [
                weight_norm(nn.Conv2d(1, c, (3, 9), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 9), stride=(1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(c, c, (3, 3), padding=(1, 1))),
            ]
        )
        self.conv_post = weight_norm(nn.Conv2d(c, 1, (3, 3), padding=(1, 1)))

    def forward(self, x):  # [B, T]
        pad = self.stft_cfg.n_fft // 2 + 1 - x.shape[-1]
        if pad > 0:
            x = F.pad(x, (0, pad))
        amp, _ = dsp.stft_tensor(x, self.stft_cfg)
        x = amp.transpose(-1, -2).unsqueeze(1)  # [B, 1, frames, bins]
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            features.append(x)
        x = self.conv_post(x)
        features.append(x)
        return torch.flatten(x, 1), features


class ScaleDiscriminator(nn.Module):
    """1-D conv stack over the raw (possibly pooled) waveform."""

    def __init__(self, use_spectral_norm=False):
        super().__init__()
        norm = spectral_norm if use_spectral_norm else weight_norm
        self.convs = nn.ModuleList(
            [
                norm(nn.Conv1d(1, 128, 15, padding=7)),
                norm(nn.Conv1d(128, 128, 41, stride=2, groups=4, padding=20)),
                norm(nn.Conv1d(128, 256, 41, stride=2, groups=16, padding=20)),
                norm(nn.Conv1d(256, 512, 41, stride=4, groups=16, padding=20)),
                norm(nn.Conv1d(512, 1024, 41, stride=4, groups=16, padding=20)),
                norm(nn.Conv1d(1024, 1024, 41, groups=16, padding=20)),
                norm(nn.Conv1d(1024, 1024, 5, padding=2)),
            ]
        )
        self.conv_post = norm(nn.Conv1d(1024, 1, 3, padding=1))

    def forward(self, x):  # [B, T]
        x = x.unsqueeze(1)
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            features.append(x)
        x = self.conv_post(x)
        features.append(x)
        return torch.flatten(x, 1), features


class DiscriminatorSuite(nn.Module):
    """Multi-period critics plus either multi-resolution or multi-scale ones.

    ``forward`` returns one flattened score map per sub-discriminator and the
    matching stacks of intermediate activations for feature matching.
    """

    def __init__(self, cfg: DiscriminatorSuiteConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorSuiteConfig()
        subs = [PeriodDiscriminator(p) for p in self.cfg.periods]
        if self.cfg.variant == "mrd":
            subs += [
                ResolutionDiscriminator(r, sample_rate=self.cfg.sample_rate)
                for r in self.cfg.resolutions
            ]
            self.pool = None
        else:
            subs += [ScaleDiscriminator(use_spectral_norm=True),
                     ScaleDiscriminator(), ScaleDiscriminator()]
            self.pool = nn.AvgPool1d(4, 2, padding=2)
        self.subs = nn.ModuleList(subs)

    def forward(self, wav: torch.Tensor):
        x = _as_batched(wav)
        scores, features = [], []
        n_periods = len(self.cfg.periods)
        scale_input = x
        for i, sub in enumerate(self.subs):
            if self.cfg.variant == "msd" and i > n_periods:
                scale_input = self.pool(scale_input.unsqueeze(1)).squeeze(1)
            inp = scale_input if (self.cfg.variant == "msd" and i >= n_periods) else x
            score, feats = sub(inp)
            scores.append(score)
            features.append(feats)
        return scores, features


class MetricDiscriminator(nn.Module):
    """Regresses a [0, 1] quality score from (enhanced, reference) amplitudes.

    Inputs are power-compressed amplitude spectrograms ``[B, T, F]``; the two
    are stacked as channels and reduced to one sigmoid-bounded scalar each.
    """

    def __init__(self, channels=16, compress=0.3):
        super().__init__()
        self.compress = compress
        c = channels
        self.convs = nn.ModuleList(
            [
                spectral_norm(nn.Conv2d(2, c, (4, 4), (2, 2), (1, 1), bias=False)),
                spectral_norm(nn.Conv2d(c, 2 * c, (4, 4), (2, 2), (1, 1), bias=False)),
                spectral_norm(nn.Conv2d(2 * c, 4 * c, (4, 4), (2, 2), (1, 1), bias=False)),
                spectral_norm(nn.Conv2d(4 * c, 8 * c, (4, 4), (2, 2), (1, 1), bias=False)),
            ]
        )
        self.norms = nn.ModuleList(nn.InstanceNorm2d(c * m, affine=True) for m in (1, 2, 4, 8))
        self.acts = nn.ModuleList(nn.PReLU(c * m) for m in (1, 2, 4, 8))
        self.head = nn.Sequential(
            nn.AdaptiveMaxPool2d(1),
            nn.Flatten(),
            spectral_norm(nn.Linear(8 * c, 4 * c)),
            nn.PReLU(4 * c),
            spectral_norm(nn.Linear(4 * c, 1)),
            nn.Sigmoid(),
        )

    def forward(self, amp_pred: torch.Tensor, amp_ref: torch.Tensor) -> torch.Tensor:
        if amp_pred.shape != amp_ref.shape:
            raise ValueError(
                f"shape mismatch {tuple(amp_pred.shape)} vs {tuple(amp_ref.shape)}"
            )
        if amp_pred.dim() == 2:
            amp_pred, amp_ref = amp_pred.unsqueeze(0), amp_ref.unsqueeze(0)
        x = torch.stack(
            [amp_pred.clamp_min(0) ** self.compress, amp_ref.clamp_min(0) ** self.compress],
            dim=1,
        )
        for conv, norm, act in zip(self.convs, self.norms, self.acts):
            x = act(norm(conv(x)))
        return self.head(x).squeeze(-1)


def discriminate(wav, suite: DiscriminatorSuite):
    """Score a waveform with every sub-discriminator.

    Short inputs are padded inside each branch, never rejected.
    """
    if isinstance(wav, dsp.Waveform):
        wav = wav.to_tensor()
    return suite(wav)
