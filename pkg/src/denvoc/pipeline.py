"""End-to-end two-stage inference, checkpoint binding, evaluation, ablation.

The stages are always bridged through a time-domain waveform: stage 1 spectra
are resynthesized under the predictor's STFT config and re-analyzed under the
enhancer's config, even when the two configs coincide (the
``matching_stft`` variant makes that bridge an identity-config round trip).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import data as data_mod
from . import dsp, metrics, training
from .dsp import MelSpectrogram, StftConfig, Waveform
from .enhancer import Enhancer, EnhancerConfig, enhancer_forward, enhancer_reconstruct
from .errors import ConfigurationError
from .spectrum_predictor import (
    PredictorConfig,
    SpectrumPredictor,
    predictor_forward,
    predictor_reconstruct,
)

log = logging.getLogger(__name__)

VARIANTS = ("proposed", "rep_apnet", "matching_stft")


@dataclass
class PipelineConfig:
    variant: str = "proposed"
    predictor_stft: StftConfig = field(default_factory=lambda: dsp.PREDICTOR_STFT)
    enhancer_stft: StftConfig = field(default_factory=lambda: dsp.ENHANCER_STFT)
    predictor_checkpoint: str | None = None
    enhancer_checkpoint: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.variant == "matching_stft":
            # stage 1 adopts the enhancement stage's analysis parameters
            self.predictor_stft = self.enhancer_stft


def load_pipeline_models(cfg: PipelineConfig) -> tuple[SpectrumPredictor, Enhancer]:
    """Load both stages, refusing checkpoints bound to other STFT configs."""
    if not cfg.predictor_checkpoint or not cfg.enhancer_checkpoint:
        raise ConfigurationError("both stage checkpoints are required")
    pred_ckpt = training.load_checkpoint(
        cfg.predictor_checkpoint,
        expected_configs={"stft": cfg.predictor_stft.as_dict(), "stage": "predictor"},
    )
    enh_ckpt = training.load_checkpoint(
        cfg.enhancer_checkpoint,
        expected_configs={"stft": cfg.enhancer_stft.as_dict(), "stage": "enhancer"},
    )
    pcfg = PredictorConfig(
        **{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in pred_ckpt["meta"]["configs"]["model"].items()
        }
    )
    ecfg = EnhancerConfig(**enh_ckpt["meta"]["configs"]["model"])
    predictor = SpectrumPredictor(pcfg)
    predictor.load_state_dict(pred_ckpt["blob"]["model"])
    predictor.eval()
    enhancer = Enhancer(ecfg)
    enhancer.load_state_dict(enh_ckpt["blob"]["model"])
    enhancer.eval()
    return predictor, enhancer


def denoise(
    mel: MelSpectrogram,
    predictor: SpectrumPredictor,
    enhancer: Enhancer,
    cfg: PipelineConfig,
    length: int | None = None,
) -> Waveform:
    """Noisy mel -> noisy spectra -> noisy waveform bridge -> clean waveform."""
    if mel.config != cfg.predictor_stft:
        raise ConfigurationError(
            "mel-spectrogram was extracted under a different STFT config than "
            "the pipeline's stage-1 config"
        )
    stage1 = predictor_forward(mel, predictor)
    bridge = predictor_reconstruct(stage1, cfg.predictor_stft, length=length)
    noisy_spec = dsp.stft(bridge, cfg.enhancer_stft)
    stage2 = enhancer_forward(noisy_spec, enhancer)
    return enhancer_reconstruct(stage2, cfg.enhancer_stft, length=len(bridge))


def denoise_waveform(
    noisy: Waveform,
    predictor: SpectrumPredictor,
    enhancer: Enhancer,
    cfg: PipelineConfig,
) -> Waveform:
    """Convenience wrapper: extract the stage-1 mel, then denoise."""
    mel = dsp.mel_spectrogram(noisy, cfg.predictor_stft)
    return denoise(mel, predictor, enhancer, cfg, length=len(noisy))


# ---------------------------------------------------------------------------
# Evaluation and ablation
# ---------------------------------------------------------------------------


def _iter_eval_pairs(manifest, split, limit=None):
    pairs = manifest.split(split) if split else manifest.pairs
    if limit is not None:
        pairs = pairs[:limit]
    if not pairs:
        raise ValueError(f"no utterances in split {split!r}")
    subset = data_mod.Manifest(pairs=pairs)
    yield from data_mod.ingest_all(subset)


def evaluate_checkpoint(
    manifest: data_mod.Manifest,
    cfg: PipelineConfig | None = None,
    split: str = "test",
    identity_noisy: bool = False,
    limit: int | None = None,
) -> metrics.MetricsReport:
    """Run two-stage inference (or an identity passthrough) and score it.

    ``identity_noisy`` scores the noisy input against the clean reference,
    which needs no checkpoints and reproduces the untreated-corpus row of the
    evaluation tables.
    """
    note: dict = {"split": split, "identity_noisy": identity_noisy}
    if identity_noisy:
        items = (
            (pair.id, clean, noisy)
            for pair, clean, noisy in _iter_eval_pairs(manifest, split, limit)
        )
        return metrics.evaluate_pairs(items, config=note)
    cfg = cfg or PipelineConfig()
    predictor, enhancer = load_pipeline_models(cfg)
    note["variant"] = cfg.variant

    def _items():
        for pair, clean, noisy in _iter_eval_pairs(manifest, split, limit):
            yield pair.id, clean, denoise_waveform(noisy, predictor, enhancer, cfg)

    return metrics.evaluate_pairs(_items(), config=note)


def ablate(
    manifest: data_mod.Manifest,
    checkpoints: dict[str, tuple[str, str]],
    split: str = "test",
    limit: int = 10,
) -> dict[str, metrics.MetricsReport]:
    """Run every pipeline variant end-to-end and report the six metrics each.

    ``checkpoints`` maps variant name to ``(predictor_ckpt, enhancer_ckpt)``;
    the matching-STFT variant requires a predictor retrained under the
    enhancement stage's config, while the enhancer checkpoint may be shared.
    """
    reports = {}
    for variant in VARIANTS:
        if variant not in checkpoints:
            raise ConfigurationError(f"missing checkpoints for variant {variant!r}")
        pred_ckpt, enh_ckpt = checkpoints[variant]
        cfg = PipelineConfig(
            variant=variant,
            predictor_checkpoint=str(pred_ckpt),
            enhancer_checkpoint=str(enh_ckpt),
        )
        reports[variant] = evaluate_checkpoint(manifest, cfg, split=split, limit=limit)
    return reports


def render_ablation_table(reports: dict[str, metrics.MetricsReport]) -> str:
    header = " ".join(f"{c.upper():>6}" for c in metrics.METRIC_COLUMNS)
    fmt = lambda v: f"{v:6.2f}" if v is not None else "   n/a"  # noqa: E731
    lines = [f"{'variant':<16} {header}"]
    for variant, report in reports.items():
        means = report.means
        lines.append(
            f"{variant:<16} "
            + " ".join(fmt(means[c]) for c in metrics.METRIC_COLUMNS)
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Flat config files
# ---------------------------------------------------------------------------


def load_flat_config(path) -> dict:
    """Flat key/value YAML document; nested structures are rejected."""
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: expected a flat mapping")
    for key, value in doc.items():
        if isinstance(value, dict):
            raise ConfigurationError(f"{path}: nested value under {key!r} not allowed")
    return doc


def apply_flat_config(instance, flat: dict):
    """Return a dataclass copy with any matching keys overridden."""
    names = {f.name for f in instance.__dataclass_fields__.values()}
    updates = {}
    for key, value in flat.items():
        if key in names:
            current = getattr(instance, key)
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            updates[key] = value
    return replace(instance, **updates) if updates else instance
