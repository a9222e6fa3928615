"""Spectral analysis and synthesis shared by every pipeline stage.

Layout conventions:
    * numpy dataclasses (``SpectralPair``, ``MelSpectrogram``) store spectra as
      ``[frames, bins]``;
    * torch tensors exchanged with models are ``[..., bins, frames]`` so that
      frequency bins sit on the convolution channel axis.

All functions here are pure; the torch variants are differentiable and are the
only STFT/iSTFT code path in the package (models and losses reuse them).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError

TWO_PI = 2.0 * math.pi

_MEL_BREAK_HZ = 1000.0
_MEL_BREAK = 15.0  # mels at the 1 kHz linear/log breakpoint (1000 / 66.67)
_MEL_LOGSTEP = math.log(6.4) / 27.0


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters; ``hop_length <= win_length <= n_fft``."""

    n_fft: int = 1024
    win_length: int = 320
    hop_length: int = 80
    window: str = "hann"
    sample_rate: int = 16000
    center: bool = True

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ConfigurationError(
                f"need 0 < hop <= win <= n_fft, got "
                f"{self.hop_length}/{self.win_length}/{self.n_fft}"
            )
        if self.sample_rate <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.window != "hann":
            raise ConfigurationError(f"unsupported window {self.window!r}")

    @property
    def bins(self) -> int:
        return self.n_fft // 2 + 1

    def window_array(self) -> np.ndarray:
        # periodic Hann: w[n] = 0.5 (1 - cos(2 pi n / N))
        n = np.arange(self.win_length, dtype=np.float64)
        return 0.5 * (1.0 - np.cos(TWO_PI * n / self.win_length))

    def window_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.hann_window(
            self.win_length, periodic=True, dtype=dtype, device=device
        )

    def as_dict(self) -> dict:
        return {
            "n_fft": self.n_fft,
            "win_length": self.win_length,
            "hop_length": self.hop_length,
            "window": self.window,
            "sample_rate": self.sample_rate,
            "center": self.center,
        }


# The two operating points used by the pipeline: the spectrum predictor works
# at 1024/320/80 and the enhancement stage at 400/400/100 (16 kHz throughout).
PREDICTOR_STFT = StftConfig(n_fft=1024, win_length=320, hop_length=80)
ENHANCER_STFT = StftConfig(n_fft=400, win_length=400, hop_length=100)


@dataclass
class Waveform:
    """Mono time-domain signal."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.samples.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.samples, dtype=dtype)


@dataclass
class SpectralPair:
    """Amplitude + phase spectra ``[frames, bins]`` under one ``StftConfig``."""

    amplitude: np.ndarray
    phase: np.ndarray
    config: StftConfig

    def __post_init__(self):
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.amplitude.shape != self.phase.shape:
            raise ValueError(
                f"amplitude {self.amplitude.shape} and phase {self.phase.shape} differ"
            )
        if self.amplitude.ndim != 2:
            raise ValueError(f"spectra must be [frames, bins], got {self.amplitude.shape}")
        if self.amplitude.shape[1] != self.config.bins:
            raise ValueError(
                f"expected {self.config.bins} bins, got {self.amplitude.shape[1]}"
            )
        if not (np.all(np.isfinite(self.amplitude)) and np.all(np.isfinite(self.phase))):
            raise ValueError("spectra contain non-finite values")
        if np.any(self.amplitude < 0):
            raise ValueError("amplitude spectrum must be non-negative")
        if np.any(self.phase <= -math.pi) or np.any(self.phase > math.pi):
            raise ValueError("phase must lie in the principal interval (-pi, pi]")

    @property
    def frames(self) -> int:
        return self.amplitude.shape[0]

    @property
    def bins(self) -> int:
        return self.amplitude.shape[1]

    def to_complex(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * self.phase)

    def to_tensors(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(amplitude, phase)`` as ``[bins, frames]`` tensors."""
        amp = torch.as_tensor(self.amplitude.T.copy(), dtype=dtype)
        phase = torch.as_tensor(self.phase.T.copy(), dtype=dtype)
        return amp, phase

    @classmethod
    def from_tensors(cls, amp: torch.Tensor, phase: torch.Tensor, config: StftConfig):
        """Build from ``[bins, frames]`` tensors, wrapping phase."""
        amp_np = amp.detach().cpu().double().numpy().T
        phase_np = wrap_phase(phase.detach().cpu().double().numpy().T)
        return cls(amplitude=amp_np, phase=phase_np, config=config)


@dataclass
class MelSpectrogram:
    """Log-compressed mel spectrogram ``[frames, n_mels]``."""

    values: np.ndarray
    config: StftConfig
    n_mels: int = 80

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.n_mels:
            raise ValueError(
                f"expected [frames, {self.n_mels}] mel values, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mel spectrogram contains non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Return ``[n_mels, frames]`` tensor."""
        return torch.as_tensor(self.values.T.copy(), dtype=dtype)


# ---------------------------------------------------------------------------
# Phase helpers
# ---------------------------------------------------------------------------


def wrap_phase(x) -> np.ndarray:
    """Project onto the principal interval (-pi, pi]; idempotent."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("phase contains non-finite values")
    y = x - TWO_PI * np.round(x / TWO_PI)
    return np.where(y <= -math.pi, y + TWO_PI, y)


def wrap_phase_tensor(x: torch.Tensor) -> torch.Tensor:
    """Tensor variant of :func:`wrap_phase`."""
    y = x - TWO_PI * torch.round(x / TWO_PI)
    return torch.where(y <= -math.pi, y + TWO_PI, y)


# ---------------------------------------------------------------------------
# STFT / iSTFT (torch core)
# ---------------------------------------------------------------------------


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    """Number of analysis frames an ``n_samples`` signal produces."""
    if cfg.center:
        return 1 + n_samples // cfg.hop_length
    return 1 + (n_samples - cfg.n_fft) // cfg.hop_length


def stft_complex_tensor(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Complex STFT of ``[T]`` or ``[B, T]`` input -> ``[..., bins, frames]``.

    Differentiable; with ``center`` the input must be longer than ``n_fft/2``
    (reflect padding). Use :func:`stft` for arbitrarily short numpy signals.
    """
    if cfg.center and x.shape[-1] <= cfg.n_fft // 2:
        raise ValueError(
            f"input of {x.shape[-1]} samples is too short for reflect padding "
            f"(needs > {cfg.n_fft // 2})"
        )
    if not cfg.center and x.shape[-1] < cfg.n_fft:
        raise ValueError("input shorter than n_fft with center disabled")
    return torch.stft(
        x,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        window=cfg.window_tensor(dtype=x.dtype, device=x.device),
        center=cfg.center,
        pad_mode="reflect",
        onesided=True,
        return_complex=True,
    )


def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Amplitude and wrapped phase of the STFT, each ``[..., bins, frames]``.

    Phase is 0 by convention wherever the amplitude vanishes.
    """
    spec = stft_complex_tensor(x, cfg)
    amp = spec.abs()
    phase = wrap_phase_tensor(spec.angle())
    return amp, torch.where(amp == 0, torch.zeros((), dtype=phase.dtype), phase)


def istft_tensor(
    amp: torch.Tensor,
    phase: torch.Tensor,
    cfg: StftConfig,
    length: int | None = None,
) -> torch.Tensor:
    """Overlap-add synthesis of ``[..., bins, frames]`` spectra -> ``[..., T]``.

    Window-square normalized; differentiable. Output has
    ``(frames - 1) * hop`` samples unless ``length`` trims/pads it.
    """
    validate_synthesis(cfg)
    spec = torch.polar(amp, phase) if not torch.is_complex(amp) else amp
    try:
        return torch.istft(
            spec,
            n_fft=cfg.n_fft,
            hop_length=cfg.hop_length,
            win_length=cfg.win_length,
            window=cfg.window_tensor(dtype=amp.real.dtype, device=spec.device),
            center=cfg.center,
            length=length,
        )
    except RuntimeError as exc:  # NOLA failure surfaces here for exotic configs
        raise ConfigurationError(f"iSTFT failed for {cfg}: {exc}") from exc


def ola_envelope(cfg: StftConfig, frames: int = 16) -> np.ndarray:
    """Sum of squared, hop-shifted synthesis windows over ``frames`` frames."""
    w = np.zeros(cfg.n_fft)
    off = (cfg.n_fft - cfg.win_length) // 2
    w[off : off + cfg.win_length] = cfg.window_array()
    env = np.zeros((frames - 1) * cfg.hop_length + cfg.n_fft)
    for m in range(frames):
        start = m * cfg.hop_length
        env[start : start + cfg.n_fft] += w**2
    return env


def cola_deviation(cfg: StftConfig, frames: int = 16) -> float:
    """Max relative deviation of the interior OLA envelope from flatness."""
    env = ola_envelope(cfg, frames)
    interior = env[cfg.n_fft : -cfg.n_fft]
    if interior.size == 0 or np.any(interior <= 0):
        return math.inf
    return float(np.max(np.abs(interior / interior.mean() - 1.0)))


def validate_synthesis(cfg: StftConfig, tol: float = 1e-10) -> None:
    """Reject configs whose OLA envelope has (near-)zeros: not invertible."""
    env = ola_envelope(cfg, frames=16)
    interior = env[cfg.n_fft : -cfg.n_fft]
    if interior.size == 0 or float(interior.min()) < tol:
        raise ConfigurationError(
            f"window/hop pair {cfg.win_length}/{cfg.hop_length} violates the "
            "overlap-add condition; synthesis is not invertible"
        )


# ---------------------------------------------------------------------------
# numpy-facing API
# ---------------------------------------------------------------------------


def stft(w: Waveform, cfg: StftConfig) -> SpectralPair:
    """Analyze a waveform into an amplitude/phase pair.

    With ``center`` the signal is reflect-padded so frame ``t`` is centered at
    ``t * hop``; the frame count is ``1 + floor(len / hop)``.
    """
    x = w.samples
    if cfg.center:
        pad = cfg.n_fft // 2
        x = np.pad(x, pad, mode="reflect") if x.size > 1 else np.full(2 * pad + 1, x[0])
    elif x.size < cfg.n_fft:
        raise ValueError("input shorter than n_fft with center disabled")
    spec = torch.stft(
        torch.from_numpy(np.ascontiguousarray(x)),
        n_fft=cfg.n_fft,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        window=cfg.window_tensor(dtype=torch.float64),
        center=False,
        onesided=True,
        return_complex=True,
    )
    amp = spec.abs().numpy().T
    phase = wrap_phase(spec.angle().numpy().T)
    phase[amp == 0] = 0.0  # zero-amplitude bins carry no phase information
    return SpectralPair(amplitude=amp, phase=phase, config=cfg)


def istft(s: SpectralPair, length: int | None = None) -> Waveform:
    """Resynthesize a waveform from an amplitude/phase pair."""
    if s.frames < 2:
        raise ValueError("need at least two frames to overlap-add")
    amp, phase = s.to_tensors(dtype=torch.float64)
    y = istft_tensor(amp, phase, s.config, length=length)
    return Waveform(samples=y.numpy(), sample_rate=s.config.sample_rate)


def _hz_to_mel(freq):
    """Mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    mel = freq / (_MEL_BREAK_HZ / _MEL_BREAK)
    log_region = freq >= _MEL_BREAK_HZ
    mel = np.where(
        log_region,
        _MEL_BREAK + np.log(np.maximum(freq, _MEL_BREAK_HZ) / _MEL_BREAK_HZ) / _MEL_LOGSTEP,
        mel,
    )
    return mel


def _mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    freq = mel * (_MEL_BREAK_HZ / _MEL_BREAK)
    log_region = mel >= _MEL_BREAK
    freq = np.where(
        log_region,
        _MEL_BREAK_HZ * np.exp(_MEL_LOGSTEP * (mel - _MEL_BREAK)),
        freq,
    )
    return freq


def mel_filterbank(
    sample_rate: int,
    n_fft: int,
    n_mels: int = 80,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> np.ndarray:
    """Triangular, area-normalized mel filterbank ``[n_mels, n_fft // 2 + 1]``."""
    if n_mels <= 0:
        raise ConfigurationError(f"n_mels must be positive, got {n_mels}")
    if f_max is None:
        f_max = sample_rate / 2
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ConfigurationError(
            f"need 0 <= f_min < f_max <= sr/2, got {f_min}/{f_max} at {sample_rate} Hz"
        )
    bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2, bins)
    mel_pts = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2))
    fdiff = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    # area normalization keeps per-band gain independent of bandwidth
    weights *= (2.0 / (mel_pts[2:] - mel_pts[:-2]))[:, None]
    return weights


_FB_CACHE: dict[tuple, torch.Tensor] = {}


def mel_filterbank_tensor(
    cfg: StftConfig,
    n_mels: int = 80,
    f_min: float = 0.0,
    f_max: float | None = None,
    dtype=torch.float32,
    device=None,
) -> torch.Tensor:
    key = (cfg.sample_rate, cfg.n_fft, n_mels, f_min, f_max, dtype, str(device))
    fb = _FB_CACHE.get(key)
    if fb is None:
        fb = torch.as_tensor(
            mel_filterbank(cfg.sample_rate, cfg.n_fft, n_mels, f_min, f_max),
            dtype=dtype,
            device=device,
        )
        _FB_CACHE[key] = fb
    return fb


def mel_tensor(
    x: torch.Tensor,
    cfg: StftConfig,
    n_mels: int = 80,
    f_min: float = 0.0,
    f_max: float | None = 8000.0,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Differentiable log-mel of ``[..., T]`` audio -> ``[..., n_mels, frames]``."""
    amp, _ = stft_tensor(x, cfg)
    fb = mel_filterbank_tensor(cfg, n_mels, f_min, f_max, dtype=amp.dtype, device=amp.device)
    return torch.log(fb @ amp + eps)


def mel_spectrogram(
    w: Waveform,
    cfg: StftConfig,
    n_mels: int = 80,
    f_min: float = 0.0,
    f_max: float | None = 8000.0,
    eps: float = 1e-5,
) -> MelSpectrogram:
    """Log-compressed mel spectrogram of a waveform."""
    pair = stft(w, cfg)
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, n_mels, f_min, f_max)
    values = np.log(pair.amplitude @ fb.T + eps)
    return MelSpectrogram(values=values, config=cfg, n_mels=n_mels)


def compose_noisy_phase(clean: SpectralPair, noise: SpectralPair) -> SpectralPair:
    """Additive mixture of two spectra in the complex plane.

    Returns amplitude/phase of ``Xa e^{jXp} + Na e^{jNp}``. When the noise
    amplitude vanishes the output phase equals the clean phase; as the
    noise-to-signal amplitude ratio grows the phase deviates increasingly.
    """
    if clean.amplitude.shape != noise.amplitude.shape:
        raise ValueError(
            f"shape mismatch: clean {clean.amplitude.shape} vs noise {noise.amplitude.shape}"
        )
    if clean.config != noise.config:
        raise ConfigurationError("clean and noise spectra use different STFT configs")
    re = clean.amplitude * np.cos(clean.phase) + noise.amplitude * np.cos(noise.phase)
    im = clean.amplitude * np.sin(clean.phase) + noise.amplitude * np.sin(noise.phase)
    amp = np.hypot(re, im)
    phase = wrap_phase(np.arctan2(im, re))
    # where one term vanishes the sum IS the other term; skip the rounding trip
    only_clean = noise.amplitude == 0
    only_noise = (clean.amplitude == 0) & ~only_clean
    amp = np.where(only_clean, clean.amplitude, np.where(only_noise, noise.amplitude, amp))
    phase = np.where(only_clean, clean.phase, np.where(only_noise, noise.phase, phase))
    return SpectralPair(amplitude=amp, phase=phase, config=clean.config)
