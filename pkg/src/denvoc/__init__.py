"""Two-stage neural denoising vocoder.

A spectrum predictor turns a noisy mel-spectrogram into noisy amplitude and
phase spectra; an enhancement module denoises them; iSTFT renders the clean
waveform.
"""

from .dsp import (
    ENHANCER_STFT,
    PREDICTOR_STFT,
    MelSpectrogram,
    SpectralPair,
    StftConfig,
    Waveform,
    compose_noisy_phase,
    istft,
    mel_spectrogram,
    stft,
    wrap_phase,
)
from .enhancer import Enhancer, EnhancerConfig
from .errors import ConfigurationError
from .losses import LossWeights
from .pipeline import PipelineConfig, denoise, denoise_waveform
from .spectrum_predictor import PredictorConfig, SpectrumPredictor
from .training import TrainConfig, train_enhancer, train_predictor

__version__ = "0.1.0"

__all__ = [
    "ENHANCER_STFT",
    "PREDICTOR_STFT",
    "ConfigurationError",
    "Enhancer",
    "EnhancerConfig",
    "LossWeights",
    "MelSpectrogram",
    "PipelineConfig",
    "PredictorConfig",
    "SpectralPair",
    "SpectrumPredictor",
    "StftConfig",
    "TrainConfig",
    "Waveform",
    "compose_noisy_phase",
    "denoise",
    "denoise_waveform",
    "istft",
    "mel_spectrogram",
    "stft",
    "train_enhancer",
    "train_predictor",
    "wrap_phase",
]
