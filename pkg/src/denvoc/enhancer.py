"""Stage 2: amplitude-mask + phase denoiser over 400/400/100 spectra.

Noisy amplitude (power-compressed) and phase are stacked as a two-channel
image, encoded with a dilated dense encoder, refined by Conformer blocks that
alternate attention along the time and frequency axes, and decoded into a
bounded amplitude mask and a wrapped clean phase. The mask is applied in the
compressed domain, so the enhanced amplitude can never exceed
``mask_bound ** (1 / compress)`` times the input amplitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import dsp
from .dsp import SpectralPair, StftConfig, Waveform
from .errors import ConfigurationError


@dataclass(frozen=True)
class EnhancerConfig:
    n_fft: int = 400
    compress: float = 0.3
    channels: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    mask_bound: float = 2.0
    conv_kernel: int = 31
    dropout: float = 0.0

    def __post_init__(self):
        if not (0 < self.compress <= 1):
            raise ConfigurationError(f"compress must be in (0, 1], got {self.compress}")
        if self.mask_bound <= 0:
            raise ConfigurationError(f"mask_bound must be positive, got {self.mask_bound}")
        if self.channels <= 0 or self.n_blocks <= 0 or self.n_heads <= 0:
            raise ConfigurationError("channels, n_blocks and n_heads must be positive")

    @property
    def bins(self) -> int:
        return self.n_fft // 2 + 1

    @classmethod
    def toy(cls, **overrides) -> "EnhancerConfig":
        """Small preset for desk-scale tests and the overfit harness."""
        base = dict(channels=16, n_blocks=1, n_heads=2, conv_kernel=15)
        base.update(overrides)
        return cls(**base)

    def as_dict(self) -> dict:
        return {
            "n_fft": self.n_fft,
            "compress": self.compress,
            "channels": self.channels,
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
            "mask_bound": self.mask_bound,
            "conv_kernel": self.conv_kernel,
            "dropout": self.dropout,
        }


@dataclass
class EnhancerOutput:
    """Enhanced spectra, ``[frames, bins]``; amplitude >= 0, phase in (-pi, pi]."""

    amplitude: np.ndarray
    phase: np.ndarray


class DilatedDenseBlock(nn.Module):
    """Densely connected convs with time dilation doubling per layer."""

    def __init__(self, channels, depth=4):
        super().__init__()
        self.layers = nn.ModuleList()
        for i in range(depth):
            dil = 2**i
            self.layers.append(
                nn.Sequential(
                    nn.Conv2d(
                        channels * (i + 1),
                        channels,
                        (3, 3),
                        dilation=(dil, 1),
                        padding=(dil, 1),
                    ),
                    nn.InstanceNorm2d(channels, affine=True),
                    nn.PReLU(channels),
                )
            )

    def forward(self, x):
        skip = x
        for layer in self.layers:
            out = layer(skip)
            skip = torch.cat([out, skip], dim=1)
        return out


class DenseEncoder(nn.Module):
    """2-channel input -> feature map with the frequency axis halved."""

    def __init__(self, channels, in_channels=2):
        super().__init__()
        self.conv_in = nn.Sequential(
            nn.Conv2d(in_channels, channels, (1, 1)),
            nn.InstanceNorm2d(channels, affine=True),
            nn.PReLU(channels),
        )
        self.dense = DilatedDenseBlock(channels)
        self.conv_down = nn.Sequential(
            nn.Conv2d(channels, channels, (1, 3), stride=(1, 2), padding=(0, 1)),
            nn.InstanceNorm2d(channels, affine=True),
            nn.PReLU(channels),
        )

    def forward(self, x):  # [B, 2, T, F] -> [B, C, T, (F-1)//2 + 1]
        return self.conv_down(self.dense(self.conv_in(x)))


class SubPixelConv(nn.Module):
    """Conv followed by interleaving r outputs along frequency (upsample by r)."""

    def __init__(self, in_channels, out_channels, r=2):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels * r, (1, 3), padding=(0, 1))
        self.r = r
        self.out_channels = out_channels

    def forward(self, x):
        out = self.conv(x)
        b, c, t, f = out.shape
        out = out.view(b, self.r, c // self.r, t, f)
        out = out.permute(0, 2, 3, 4, 1).contiguous()
        return out.view(b, c // self.r, t, f * self.r)


class FeedForwardModule(nn.Module):
    def __init__(self, dim, mult=4, dropout=0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, dim * mult),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(dim * mult, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class AttentionModule(nn.Module):
    def __init__(self, dim, n_heads, dropout=0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, dropout=dropout, batch_first=True)

    def forward(self, x):
        y = self.norm(x)
        out, _ = self.attn(y, y, y, need_weights=False)
        return out


class ConvolutionModule(nn.Module):
    def __init__(self, dim, kernel=31, dropout=0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, dim * 2, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.bn = nn.BatchNorm1d(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):  # [B, L, C]
        y = self.norm(x).transpose(1, 2)
        y = nn.functional.glu(self.pointwise_in(y), dim=1)
        y = nn.functional.silu(self.bn(self.depthwise(y)))
        y = self.pointwise_out(y).transpose(1, 2)
        return self.drop(y)


class ConformerBlock(nn.Module):
    """Half-step FFN, self-attention, convolution, half-step FFN, LayerNorm."""

    def __init__(self, dim, n_heads=4, conv_kernel=31, dropout=0.0):
        super().__init__()
        self.ffn1 = FeedForwardModule(dim, dropout=dropout)
        self.attn = AttentionModule(dim, n_heads, dropout=dropout)
        self.conv = ConvolutionModule(dim, kernel=conv_kernel, dropout=dropout)
        self.ffn2 = FeedForwardModule(dim, dropout=dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = x + 0.5 * self.ffn1(x)
        x = x + self.attn(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ffn2(x)
        return self.norm(x)


class TSConformerBlock(nn.Module):
    """Conformer over the time axis, then over the frequency axis."""

    def __init__(self, channels, n_heads=4, conv_kernel=31, dropout=0.0):
        super().__init__()
        self.time_conformer = ConformerBlock(channels, n_heads, conv_kernel, dropout)
        self.freq_conformer = ConformerBlock(channels, n_heads, conv_kernel, dropout)

    def forward(self, x):  # [B, C, T, F]
        b, c, t, f = x.shape
        x = x.permute(0, 3, 2, 1).reshape(b * f, t, c)
        x = self.time_conformer(x) + x
        x = x.view(b, f, t, c).permute(0, 2, 1, 3).reshape(b * t, f, c)
        x = self.freq_conformer(x) + x
        return x.view(b, t, f, c).permute(0, 3, 1, 2)


class LearnableSigmoid(nn.Module):
    """Per-bin sigmoid with learnable slope, scaled to (0, bound)."""

    def __init__(self, bins, bound=2.0):
        super().__init__()
        self.slope = nn.Parameter(torch.ones(bins))
        self.bound = bound

    def forward(self, x):  # [..., bins]
        return self.bound * torch.sigmoid(self.slope * x)


class MaskDecoder(nn.Module):
    def __init__(self, channels, bins, bound=2.0):
        super().__init__()
        self.dense = DilatedDenseBlock(channels)
        self.up = SubPixelConv(channels, channels, r=2)
        self.conv_out = nn.Sequential(
            nn.Conv2d(channels, 1, (1, 2)),
            nn.InstanceNorm2d(1, affine=True),
            nn.PReLU(1),
            nn.Conv2d(1, 1, (1, 1)),
        )
        self.gate = LearnableSigmoid(bins, bound=bound)

    def forward(self, x):  # [B, C, T, F'] -> mask [B, T, F]
        y = self.conv_out(self.up(self.dense(x)))
        return self.gate(y.squeeze(1))


class PhaseDecoder(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.dense = DilatedDenseBlock(channels)
        self.up = SubPixelConv(channels, channels, r=2)
        self.norm = nn.Sequential(nn.InstanceNorm2d(channels, affine=True), nn.PReLU(channels))
        self.conv_r = nn.Conv2d(channels, 1, (1, 2))
        self.conv_i = nn.Conv2d(channels, 1, (1, 2))

    def forward(self, x):  # [B, C, T, F'] -> phase [B, T, F]
        y = self.norm(self.up(self.dense(x)))
        r = self.conv_r(y).squeeze(1)
        i = self.conv_i(y).squeeze(1)
        return dsp.wrap_phase_tensor(torch.atan2(i, r))


class Enhancer(nn.Module):
    """Bounded-mask amplitude denoiser + phase denoiser.

    ``forward(amplitude, phase)`` takes uncompressed spectra ``[B, T, F]``
    (or unbatched ``[T, F]``) and returns enhanced ``(amplitude, phase)`` of
    the same shape.
    """

    def __init__(self, cfg: EnhancerConfig | None = None):
        super().__init__()
        self.cfg = cfg or EnhancerConfig()
        c = self.cfg.channels
        self.encoder = DenseEncoder(c)
        self.blocks = nn.ModuleList(
            TSConformerBlock(c, self.cfg.n_heads, self.cfg.conv_kernel, self.cfg.dropout)
            for _ in range(self.cfg.n_blocks)
        )
        self.mask_decoder = MaskDecoder(c, self.cfg.bins, bound=self.cfg.mask_bound)
        self.phase_decoder = PhaseDecoder(c)

    def forward(self, amplitude: torch.Tensor, phase: torch.Tensor):
        if amplitude.shape != phase.shape:
            raise ValueError(
                f"amplitude {tuple(amplitude.shape)} and phase {tuple(phase.shape)} differ"
            )
        if amplitude.shape[-1] != self.cfg.bins:
            raise ConfigurationError(
                f"expected {self.cfg.bins} bins, got {amplitude.shape[-1]}"
            )
        squeeze = amplitude.dim() == 2
        if squeeze:
            amplitude, phase = amplitude.unsqueeze(0), phase.unsqueeze(0)
        comp = amplitude.clamp_min(0) ** self.cfg.compress
        z = self.encoder(torch.stack([comp, phase], dim=1))
        for block in self.blocks:
            z = block(z)
        mask = self.mask_decoder(z)
        amp_hat = (mask * comp) ** (1.0 / self.cfg.compress)
        phase_hat = self.phase_decoder(z)
        if squeeze:
            return amp_hat.squeeze(0), phase_hat.squeeze(0)
        return amp_hat, phase_hat


def enhancer_forward(noisy: SpectralPair, model: Enhancer) -> EnhancerOutput:
    """Run the enhancer on one utterance's spectra."""
    if noisy.bins != model.cfg.bins:
        raise ConfigurationError(
            f"spectra have {noisy.bins} bins but the model expects {model.cfg.bins}"
        )
    amp = torch.as_tensor(noisy.amplitude, dtype=torch.float32)
    phase = torch.as_tensor(noisy.phase, dtype=torch.float32)
    with torch.no_grad():
        amp_hat, phase_hat = model(amp, phase)
    return EnhancerOutput(
        amplitude=np.maximum(amp_hat.double().numpy(), 0.0),
        phase=dsp.wrap_phase(phase_hat.double().numpy()),
    )


def enhancer_reconstruct(out: EnhancerOutput, cfg: StftConfig,
                         length: int | None = None) -> Waveform:
    """iSTFT of enhanced spectra under the enhancement-stage config."""
    if out.amplitude.shape[1] != cfg.bins:
        raise ConfigurationError(
            f"enhancer emits {out.amplitude.shape[1]} bins but config has {cfg.bins}"
        )
    pair = SpectralPair(amplitude=out.amplitude, phase=out.phase, config=cfg)
    return dsp.istft(pair, length=length)


def load_external_weights(model: Enhancer, path, name_map: dict[str, str] | None = None):
    """Load a pretrained state dict, optionally renaming keys.

    ``name_map`` maps source-key prefixes to this model's prefixes (longest
    match wins). Every mapped tensor must match the target shape exactly;
    mismatches and missing/unexpected keys raise ``ConfigurationError`` with
    the full list of offenders, so a bad import never half-applies.
    """
    blob = torch.load(path, map_location="cpu", weights_only=True)
    state = blob.get("generator", blob) if isinstance(blob, dict) else blob
    if name_map:
        prefixes = sorted(name_map, key=len, reverse=True)
        renamed = {}
        for key, value in state.items():
            for prefix in prefixes:
                if key.startswith(prefix):
                    key = name_map[prefix] + key[len(prefix):]
                    break
            renamed[key] = value
        state = renamed
    target = model.state_dict()
    problems = []
    for key, value in state.items():
        if key not in target:
            problems.append(f"unexpected key {key!r}")
        elif tuple(value.shape) != tuple(target[key].shape):
            problems.append(
                f"shape mismatch for {key!r}: source {tuple(value.shape)} "
                f"vs model {tuple(target[key].shape)}"
            )
    for key in target:
        if key not in state:
            problems.append(f"missing key {key!r}")
    if problems:
        raise ConfigurationError(
            "external weights are not compatible:\n  " + "\n  ".join(problems)
        )
    model.load_state_dict(state)
    return model
