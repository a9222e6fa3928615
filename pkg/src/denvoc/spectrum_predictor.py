"""Stage 1: parallel amplitude/phase spectrum prediction from log-mel input.

Two frame-rate streams (no upsampling) map an 80-band mel-spectrogram to the
full-resolution log-amplitude spectrum and to a wrapped phase spectrum. The
phase stream emits pseudo-real/imaginary maps combined with atan2, which pins
its output to the principal interval for any parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from . import dsp
from .dsp import MelSpectrogram, StftConfig, Waveform
from .errors import ConfigurationError

LRELU_SLOPE = 0.1


@dataclass(frozen=True)
class PredictorConfig:
    n_mels: int = 80
    hidden_channels: int = 512
    n_resblocks: int = 8
    resblock_kernel_sizes: tuple[int, ...] = (3, 7, 11)
    resblock_dilations: tuple[int, ...] = (1, 3, 5)
    output_bins: int = 513
    backbone: str = "resnet"  # "resnet" | "convnext_v2"
    anti_wrap: str = "linear"  # "linear" | "cosine"; consumed by the training loop

    def __post_init__(self):
        if self.hidden_channels <= 0 or self.n_resblocks <= 0:
            raise ConfigurationError("hidden_channels and n_resblocks must be positive")
        if self.backbone not in ("resnet", "convnext_v2"):
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")
        if self.anti_wrap not in ("linear", "cosine"):
            raise ConfigurationError(f"unknown anti_wrap variant {self.anti_wrap!r}")

    @classmethod
    def toy(cls, **overrides) -> "PredictorConfig":
        """Small preset for desk-scale tests and the overfit harness."""
        base = dict(hidden_channels=128, n_resblocks=4)
        base.update(overrides)
        return cls(**base)

    def receptive_field(self) -> int:
        """Half-width, in frames, of the output's dependence on the input."""
        r = 3  # input conv, kernel 7
        for i in range(self.n_resblocks):
            if self.backbone == "convnext_v2":
                r += 3  # depthwise conv, kernel 7
            else:
                k = self.resblock_kernel_sizes[i % len(self.resblock_kernel_sizes)]
                # each dilated conv is followed by a dilation-1 conv
                r += sum((k - 1) // 2 * (d + 1) for d in self.resblock_dilations)
        r += 3  # output conv, kernel 7
        return r

    def as_dict(self) -> dict:
        return {
            "n_mels": self.n_mels,
            "hidden_channels": self.hidden_channels,
            "n_resblocks": self.n_resblocks,
            "resblock_kernel_sizes": list(self.resblock_kernel_sizes),
            "resblock_dilations": list(self.resblock_dilations),
            "output_bins": self.output_bins,
            "backbone": self.backbone,
            "anti_wrap": self.anti_wrap,
        }


@dataclass
class PredictorOutput:
    """Frame-level spectra, ``[frames, bins]`` each; phase in (-pi, pi]."""

    log_amplitude: np.ndarray
    phase: np.ndarray


class ResBlock(nn.Module):
    """Stack of (dilated conv, unit conv) pairs with residual connections."""

    def __init__(self, channels, kernel_size, dilations=(1, 3, 5)):
        super().__init__()
        self.convs1 = nn.ModuleList(
            [
                weight_norm(
                    nn.Conv1d(
                        channels,
                        channels,
                        kernel_size,
                        dilation=d,
                        padding=(kernel_size - 1) * d // 2,
                    )
                )
                for d in dilations
            ]
        )
        self.convs2 = nn.ModuleList(
            [
                weight_norm(
                    nn.Conv1d(channels, channels, kernel_size, padding=(kernel_size - 1) // 2)
                )
                for _ in dilations
            ]
        )

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = c1(F.leaky_relu(x, LRELU_SLOPE))
            xt = c2(F.leaky_relu(xt, LRELU_SLOPE))
            x = x + xt
        return x


class GRN(nn.Module):
    """Global response normalization over the frame axis."""

    def __init__(self, channels):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, channels))
        self.beta = nn.Parameter(torch.zeros(1, 1, channels))

    def forward(self, x):  # [B, T, C]
        gx = torch.norm(x, p=2, dim=1, keepdim=True)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + 1e-6)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtV2Block(nn.Module):
    """Depthwise conv + pointwise MLP with GRN; kept for the backbone ablation."""

    def __init__(self, channels, mult=4):
        super().__init__()
        self.dwconv = nn.Conv1d(channels, channels, 7, padding=3, groups=channels)
        self.norm = nn.LayerNorm(channels)
        self.pwconv1 = nn.Linear(channels, mult * channels)
        self.grn = GRN(mult * channels)
        self.pwconv2 = nn.Linear(mult * channels, channels)

    def forward(self, x):  # [B, C, T]
        xt = self.dwconv(x).transpose(1, 2)
        xt = self.norm(xt)
        xt = F.gelu(self.pwconv1(xt))
        xt = self.grn(xt)
        xt = self.pwconv2(xt).transpose(1, 2)
        return x + xt


class _Stream(nn.Module):
    """Shared trunk of ASP/PSP: input conv + residual backbone, frame rate kept."""

    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        c = cfg.hidden_channels
        self.conv_in = weight_norm(nn.Conv1d(cfg.n_mels, c, 7, padding=3))
        if cfg.backbone == "convnext_v2":
            blocks = [ConvNeXtV2Block(c) for _ in range(cfg.n_resblocks)]
        else:
            blocks = [
                ResBlock(
                    c,
                    cfg.resblock_kernel_sizes[i % len(cfg.resblock_kernel_sizes)],
                    cfg.resblock_dilations,
                )
                for i in range(cfg.n_resblocks)
            ]
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        x = self.conv_in(x)
        for block in self.blocks:
            x = block(x)
        return F.leaky_relu(x, LRELU_SLOPE)


class SpectrumPredictor(nn.Module):
    """Parallel ASP/PSP model: ``[B, n_mels, T] -> ([B, bins, T], [B, bins, T])``."""

    def __init__(self, cfg: PredictorConfig | None = None):
        super().__init__()
        self.cfg = cfg or PredictorConfig()
        c = self.cfg.hidden_channels
        self.asp = _Stream(self.cfg)
        self.asp_out = weight_norm(nn.Conv1d(c, self.cfg.output_bins, 7, padding=3))
        self.psp = _Stream(self.cfg)
        self.psp_out_r = weight_norm(nn.Conv1d(c, self.cfg.output_bins, 7, padding=3))
        self.psp_out_i = weight_norm(nn.Conv1d(c, self.cfg.output_bins, 7, padding=3))

    def forward(self, mel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if mel.shape[-2] != self.cfg.n_mels:
            raise ValueError(
                f"expected {self.cfg.n_mels} mel bands, got {mel.shape[-2]}"
            )
        squeeze = mel.dim() == 2
        if squeeze:
            mel = mel.unsqueeze(0)
        log_amp = self.asp_out(self.asp(mel))
        h = self.psp(mel)
        phase = dsp.wrap_phase_tensor(torch.atan2(self.psp_out_i(h), self.psp_out_r(h)))
        if squeeze:
            return log_amp.squeeze(0), phase.squeeze(0)
        return log_amp, phase


def predictor_forward(mel: MelSpectrogram, model: SpectrumPredictor) -> PredictorOutput:
    """Run the predictor on one utterance; spectra come back ``[frames, bins]``."""
    if mel.n_mels != model.cfg.n_mels:
        raise ValueError(f"expected {model.cfg.n_mels} mel bands, got {mel.n_mels}")
    with torch.no_grad():
        log_amp, phase = model(mel.to_tensor())
    return PredictorOutput(
        log_amplitude=log_amp.double().numpy().T,
        phase=dsp.wrap_phase(phase.double().numpy().T),
    )


def predictor_reconstruct(out: PredictorOutput, cfg: StftConfig,
                          length: int | None = None) -> Waveform:
    """iSTFT of the predicted spectra under the analysis config."""
    if out.log_amplitude.shape[1] != cfg.bins:
        raise ConfigurationError(
            f"predictor emits {out.log_amplitude.shape[1]} bins but config has {cfg.bins}"
        )
    pair = dsp.SpectralPair(
        amplitude=np.exp(out.log_amplitude), phase=dsp.wrap_phase(out.phase), config=cfg
    )
    return dsp.istft(pair, length=length)
