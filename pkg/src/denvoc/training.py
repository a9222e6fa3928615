"""Training loops for both stages, checkpointing, and deterministic sampling.

Stage 1 trains the spectrum predictor to vocode the *noisy* waveform from its
own mel-spectrogram (targets are noisy spectra); stage 2 trains the enhancer
against clean targets with a quality-score discriminator. Per-step RNG is
derived from ``(seed, step)`` so runs are reproducible and resumable.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import ExponentialLR

from . import data as data_mod
from . import dsp, losses, metrics
from .discriminators import DiscriminatorSuite, DiscriminatorSuiteConfig, MetricDiscriminator
from .dsp import StftConfig, Waveform
from .enhancer import Enhancer, EnhancerConfig
from .errors import ConfigurationError
from .losses import LossWeights
from .spectrum_predictor import PredictorConfig, SpectrumPredictor

LOG_AMP_EPS = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    stage: str  # "predictor" | "enhancer"
    max_steps: int = 700_000
    batch_size: int = 16
    segment_length: int = 32_000
    lr_init: float = 2e-4
    betas: tuple[float, float] = (0.8, 0.99)
    weight_decay: float = 0.01
    lr_decay: float = 0.999  # per epoch
    seed: int = 1234
    checkpoint_every: int = 50_000
    log_every: int = 10
    adversarial: bool = True
    metric_target: str = "ssnr"  # "ssnr" | "pesq"; quality target for the score critic
    out_dir: str | None = None

    def __post_init__(self):
        if self.stage not in ("predictor", "enhancer"):
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.lr_init <= 0 or self.max_steps <= 0:
            raise ConfigurationError("lr_init and max_steps must be positive")
        if self.metric_target not in ("ssnr", "pesq"):
            raise ConfigurationError(f"unknown metric_target {self.metric_target!r}")

    @classmethod
    def toy(cls, stage: str, **overrides) -> "TrainConfig":
        base = dict(
            stage=stage,
            max_steps=500,
            batch_size=2,
            segment_length=8000,
            checkpoint_every=10_000,
            adversarial=False,
        )
        base.update(overrides)
        return cls(**base)

    def as_dict(self) -> dict:
        return {
            "stage": self.stage,
            "max_steps": self.max_steps,
            "batch_size": self.batch_size,
            "segment_length": self.segment_length,
            "lr_init": self.lr_init,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "lr_decay": self.lr_decay,
            "seed": self.seed,
            "metric_target": self.metric_target,
        }


@dataclass
class TrainResult:
    model: torch.nn.Module
    discriminator: torch.nn.Module | None
    history: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None


# ---------------------------------------------------------------------------
# Checkpoint format: <stem>.pt (generator), <stem>.disc.pt, <stem>.json meta
# ---------------------------------------------------------------------------


def config_hash(configs: dict) -> str:
    return hashlib.sha256(json.dumps(configs, sort_keys=True).encode()).hexdigest()


def save_checkpoint(
    out_dir,
    tag: str,
    step: int,
    stage: str,
    configs: dict,
    generator: torch.nn.Module,
    discriminator: torch.nn.Module | None = None,
    opt_g=None,
    opt_d=None,
    scheduler_g=None,
    scheduler_d=None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / f"{tag}_{step:08d}"
    gen_path = stem.with_suffix(".pt")
    blob = {
        "model": generator.state_dict(),
        "optimizer": opt_g.state_dict() if opt_g else None,
        "scheduler": scheduler_g.state_dict() if scheduler_g else None,
        "step": step,
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(blob, gen_path)
    if discriminator is not None:
        torch.save(
            {
                "model": discriminator.state_dict(),
                "optimizer": opt_d.state_dict() if opt_d else None,
                "scheduler": scheduler_d.state_dict() if scheduler_d else None,
            },
            stem.parent / (stem.name + ".disc.pt"),
        )
    meta = {
        "format_version": 1,
        "step": step,
        "stage": stage,
        "configs": configs,
        "config_hash": config_hash(configs),
    }
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return gen_path


def checkpoint_meta(gen_path) -> dict:
    meta_path = Path(gen_path).with_suffix(".json")
    if not meta_path.exists():
        raise ConfigurationError(f"missing checkpoint metadata {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("config_hash") != config_hash(meta.get("configs", {})):
        raise ConfigurationError(f"checkpoint metadata hash mismatch in {meta_path}")
    return meta


def load_checkpoint(gen_path, expected_configs: dict | None = None) -> dict:
    """Load generator blob + metadata; optionally bind to expected configs."""
    gen_path = Path(gen_path)
    meta = checkpoint_meta(gen_path)
    if expected_configs is not None:
        for key, want in expected_configs.items():
            have = meta["configs"].get(key)
            if have != want:
                raise ConfigurationError(
                    f"checkpoint {gen_path.name} was trained with {key}={have}, "
                    f"but the pipeline expects {key}={want}"
                )
    blob = torch.load(gen_path, map_location="cpu", weights_only=False)
    disc_path = gen_path.parent / (gen_path.stem + ".disc.pt")
    disc_blob = (
        torch.load(disc_path, map_location="cpu", weights_only=False)
        if disc_path.exists()
        else None
    )
    return {"blob": blob, "disc_blob": disc_blob, "meta": meta}


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------


def _as_pairs(source) -> list[tuple[Waveform, Waveform]]:
    """Normalize a Manifest or a list of (clean, noisy) waveforms."""
    if isinstance(source, data_mod.Manifest):
        pairs = [(c, n) for _, c, n in data_mod.ingest_all(source)]
    else:
        pairs = list(source)
    if not pairs:
        raise ValueError("training set is empty")
    return pairs


def _sample_batch(pairs, seg_len: int, batch_size: int, rng: np.random.Generator):
    idx = rng.integers(0, len(pairs), size=batch_size)
    clean_batch, noisy_batch = [], []
    for i in idx:
        clean, noisy = pairs[int(i)]
        c, n = data_mod.random_segment(clean, noisy, seg_len, rng)
        clean_batch.append(c)
        noisy_batch.append(n)
    to_t = lambda rows: torch.as_tensor(np.stack(rows), dtype=torch.float32)  # noqa: E731
    return to_t(clean_batch), to_t(noisy_batch)


def _guard_finite(value: torch.Tensor, step: int, parts: dict):
    if not torch.isfinite(value):
        detail = {k: float(v) for k, v in parts.items()}
        raise RuntimeError(f"non-finite loss at step {step}: {detail}")


# ---------------------------------------------------------------------------
# Stage 1: spectrum predictor
# ---------------------------------------------------------------------------


def train_predictor(
    source,
    pcfg: PredictorConfig | None = None,
    tcfg: TrainConfig | None = None,
    stft_cfg: StftConfig = dsp.PREDICTOR_STFT,
    weights: LossWeights | None = None,
    suite_cfg: DiscriminatorSuiteConfig | None = None,
    resume_from=None,
    step_callback=None,
) -> TrainResult:
    """Train the mel -> (noisy amplitude, noisy phase) predictor.

    ``step_callback(step, state)`` is invoked after each step with the loss
    components and live model references; returning True stops training.
    """
    pcfg = pcfg or PredictorConfig()
    tcfg = tcfg or TrainConfig(stage="predictor")
    weights = weights or LossWeights()
    if tcfg.stage != "predictor":
        raise ConfigurationError(f"expected stage 'predictor', got {tcfg.stage!r}")
    if pcfg.output_bins != stft_cfg.bins:
        raise ConfigurationError(
            f"predictor emits {pcfg.output_bins} bins but the STFT has {stft_cfg.bins}"
        )
    pairs = _as_pairs(source)

    torch.manual_seed(tcfg.seed)
    model = SpectrumPredictor(pcfg)
    disc = DiscriminatorSuite(suite_cfg) if tcfg.adversarial else None
    opt_g = AdamW(model.parameters(), lr=tcfg.lr_init, betas=tcfg.betas,
                  weight_decay=tcfg.weight_decay)
    opt_d = (
        AdamW(disc.parameters(), lr=tcfg.lr_init, betas=tcfg.betas,
              weight_decay=tcfg.weight_decay)
        if disc is not None
        else None
    )
    sched_g = ExponentialLR(opt_g, gamma=tcfg.lr_decay)
    sched_d = ExponentialLR(opt_d, gamma=tcfg.lr_decay) if opt_d else None

    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_configs={"stft": stft_cfg.as_dict()})
        model.load_state_dict(ckpt["blob"]["model"])
        opt_g.load_state_dict(ckpt["blob"]["optimizer"])
        sched_g.load_state_dict(ckpt["blob"]["scheduler"])
        torch.set_rng_state(ckpt["blob"]["torch_rng"])
        if disc is not None and ckpt["disc_blob"] is not None:
            disc.load_state_dict(ckpt["disc_blob"]["model"])
            opt_d.load_state_dict(ckpt["disc_blob"]["optimizer"])
            sched_d.load_state_dict(ckpt["disc_blob"]["scheduler"])
        start_step = ckpt["meta"]["step"]

    wrap_fn = losses.anti_wrap if pcfg.anti_wrap == "linear" else losses.anti_wrap_cosine
    configs = {
        "stft": stft_cfg.as_dict(),
        "model": pcfg.as_dict(),
        "train": tcfg.as_dict(),
        "stage": "predictor",
    }
    steps_per_epoch = max(1, math.ceil(len(pairs) / tcfg.batch_size))
    history: list[dict] = []
    ckpt_path = None
    t0 = time.time()

    for step in range(start_step + 1, tcfg.max_steps + 1):
        rng = np.random.default_rng([tcfg.seed, step])
        _, noisy = _sample_batch(pairs, tcfg.segment_length, tcfg.batch_size, rng)
        seg_len = noisy.shape[-1]
        with torch.no_grad():
            amp_t, phase_t = dsp.stft_tensor(noisy, stft_cfg)
            logamp_t = torch.log(amp_t + LOG_AMP_EPS)
            mel_in = dsp.mel_tensor(noisy, stft_cfg)

        log_amp, phase = model(mel_in)
        amp_hat = torch.exp(log_amp)
        wav_hat = dsp.istft_tensor(amp_hat, phase, stft_cfg, length=seg_len)

        l_amp = losses.amplitude_loss(log_amp, logamp_t)
        ip, gd, iaf = losses.phase_losses(
            phase.transpose(-1, -2), phase_t.transpose(-1, -2), wrap_fn
        )
        l_cx = losses.complex_and_consistency_loss(
            (amp_hat.transpose(-1, -2), phase.transpose(-1, -2)),
            (amp_t.transpose(-1, -2), phase_t.transpose(-1, -2)),
            cfg=stft_cfg,
            length=seg_len,
        )
        fb = dsp.mel_filterbank_tensor(stft_cfg, dtype=amp_hat.dtype)
        mel_hat = torch.log(fb @ amp_hat + LOG_AMP_EPS)
        l_mel = losses.mel_loss(mel_hat, mel_in)

        recon = (
            weights.w_amp * l_amp
            + weights.w_phase_ip * ip
            + weights.w_phase_gd * gd
            + weights.w_phase_iaf * iaf
            + weights.w_complex * l_cx
            + weights.w_mel * l_mel
        )

        parts = {
            "amp": l_amp, "ip": ip, "gd": gd, "iaf": iaf,
            "complex": l_cx, "mel": l_mel, "recon": recon,
        }
        d_loss = torch.zeros(())
        g_adv = torch.zeros(())
        fm = torch.zeros(())
        if disc is not None:
            scores_r, _ = disc(noisy)
            scores_f, _ = disc(wav_hat.detach())
            d_loss, _, _ = losses.gan_losses(scores_r, scores_f, [], [])
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            scores_r, feats_r = disc(noisy)
            scores_f, feats_f = disc(wav_hat)
            _, g_adv, fm = losses.gan_losses(scores_r, scores_f, feats_r, feats_f)

        total = recon + weights.w_adv * g_adv + weights.w_fm * fm
        parts.update({"adv": g_adv, "fm": fm, "d_loss": d_loss, "total": total})
        _guard_finite(total, step, parts)

        opt_g.zero_grad()
        if opt_d is not None:
            opt_d.zero_grad()  # drop generator-phase gradients that reached the critics
        total.backward()
        opt_g.step()
        if step % steps_per_epoch == 0:
            sched_g.step()
            if sched_d is not None:
                sched_d.step()

        record = {k: float(v) for k, v in parts.items()}
        record.update(step=step, lr=sched_g.get_last_lr()[0], wall=time.time() - t0)
        if step % tcfg.log_every == 0 or step == tcfg.max_steps:
            history.append(record)
            _append_log(tcfg.out_dir, "predictor", record)
        if tcfg.out_dir and (step % tcfg.checkpoint_every == 0 or step == tcfg.max_steps):
            ckpt_path = save_checkpoint(
                tcfg.out_dir, "predictor", step, "predictor", configs,
                model, disc, opt_g, opt_d, sched_g, sched_d,
            )
        if step_callback is not None and step_callback(
            step, {"losses": record, "model": model, "discriminator": disc}
        ):
            break

    return TrainResult(model=model, discriminator=disc, history=history,
                       checkpoint_path=ckpt_path)


# ---------------------------------------------------------------------------
# Stage 2: enhancer
# ---------------------------------------------------------------------------


def _quality_target(clean_wavs: torch.Tensor, est_wavs: torch.Tensor,
                    sample_rate: int, kind: str) -> torch.Tensor:
    """Normalized [0, 1] quality of each estimate against its clean reference."""
    out = []
    for c, e in zip(clean_wavs, est_wavs):
        ref = Waveform(c.detach().double().numpy(), sample_rate)
        deg = Waveform(e.detach().double().numpy(), sample_rate)
        if kind == "pesq":
            score = metrics.pesq_adapter(ref, deg)
            norm = (score + 0.5) / 5.0 if score is not None else 0.5
        else:
            norm = (metrics.ssnr(ref, deg) - metrics.SSNR_FLOOR_DB) / (
                metrics.SSNR_CAP_DB - metrics.SSNR_FLOOR_DB
            )
        out.append(min(1.0, max(0.0, norm)))
    return torch.as_tensor(out, dtype=torch.float32)


def train_enhancer(
    source,
    ecfg: EnhancerConfig | None = None,
    tcfg: TrainConfig | None = None,
    stft_cfg: StftConfig = dsp.ENHANCER_STFT,
    weights: LossWeights | None = None,
    resume_from=None,
    step_callback=None,
) -> TrainResult:
    """Train the (noisy amplitude, phase) -> (clean amplitude, phase) denoiser."""
    ecfg = ecfg or EnhancerConfig()
    tcfg = tcfg or TrainConfig(stage="enhancer")
    weights = weights or LossWeights()
    if tcfg.stage != "enhancer":
        raise ConfigurationError(f"expected stage 'enhancer', got {tcfg.stage!r}")
    if ecfg.bins != stft_cfg.bins:
        raise ConfigurationError(
            f"enhancer expects {ecfg.bins} bins but the STFT has {stft_cfg.bins}"
        )
    pairs = _as_pairs(source)

    torch.manual_seed(tcfg.seed)
    model = Enhancer(ecfg)
    disc = MetricDiscriminator(compress=ecfg.compress) if tcfg.adversarial else None
    opt_g = AdamW(model.parameters(), lr=tcfg.lr_init, betas=tcfg.betas,
                  weight_decay=tcfg.weight_decay)
    opt_d = (
        AdamW(disc.parameters(), lr=tcfg.lr_init, betas=tcfg.betas,
              weight_decay=tcfg.weight_decay)
        if disc is not None
        else None
    )
    sched_g = ExponentialLR(opt_g, gamma=tcfg.lr_decay)
    sched_d = ExponentialLR(opt_d, gamma=tcfg.lr_decay) if opt_d else None

    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_configs={"stft": stft_cfg.as_dict()})
        model.load_state_dict(ckpt["blob"]["model"])
        opt_g.load_state_dict(ckpt["blob"]["optimizer"])
        sched_g.load_state_dict(ckpt["blob"]["scheduler"])
        torch.set_rng_state(ckpt["blob"]["torch_rng"])
        if disc is not None and ckpt["disc_blob"] is not None:
            disc.load_state_dict(ckpt["disc_blob"]["model"])
            opt_d.load_state_dict(ckpt["disc_blob"]["optimizer"])
            sched_d.load_state_dict(ckpt["disc_blob"]["scheduler"])
        start_step = ckpt["meta"]["step"]

    configs = {
        "stft": stft_cfg.as_dict(),
        "model": ecfg.as_dict(),
        "train": tcfg.as_dict(),
        "stage": "enhancer",
    }
    steps_per_epoch = max(1, math.ceil(len(pairs) / tcfg.batch_size))
    history: list[dict] = []
    ckpt_path = None
    t0 = time.time()

    for step in range(start_step + 1, tcfg.max_steps + 1):
        rng = np.random.default_rng([tcfg.seed, step])
        clean, noisy = _sample_batch(pairs, tcfg.segment_length, tcfg.batch_size, rng)
        seg_len = noisy.shape[-1]
        with torch.no_grad():
            amp_n, phase_n = dsp.stft_tensor(noisy, stft_cfg)
            amp_c, phase_c = dsp.stft_tensor(clean, stft_cfg)
            # model layout is [B, frames, bins]
            amp_n, phase_n = amp_n.transpose(-1, -2), phase_n.transpose(-1, -2)
            amp_c, phase_c = amp_c.transpose(-1, -2), phase_c.transpose(-1, -2)
            logamp_c = torch.log(amp_c + LOG_AMP_EPS)

        amp_hat, phase_hat = model(amp_n, phase_n)
        wav_hat = dsp.istft_tensor(
            amp_hat.transpose(-1, -2), phase_hat.transpose(-1, -2), stft_cfg,
            length=seg_len,
        )

        l_amp = losses.amplitude_loss(torch.log(amp_hat + LOG_AMP_EPS), logamp_c)
        ip, gd, iaf = losses.phase_losses(phase_hat, phase_c)
        l_cx = losses.complex_and_consistency_loss(
            (amp_hat, phase_hat), (amp_c, phase_c), cfg=stft_cfg, length=seg_len
        )
        l_time = losses.time_loss(wav_hat, clean)

        recon = (
            weights.w_amp * l_amp
            + weights.w_phase_ip * ip
            + weights.w_phase_gd * gd
            + weights.w_phase_iaf * iaf
            + weights.w_complex * l_cx
            + weights.w_time * l_time
        )
        parts = {
            "amp": l_amp, "ip": ip, "gd": gd, "iaf": iaf,
            "complex": l_cx, "time": l_time, "recon": recon,
        }

        d_loss = torch.zeros(())
        l_metric = torch.zeros(())
        if disc is not None:
            target_q = _quality_target(clean, wav_hat, stft_cfg.sample_rate,
                                       tcfg.metric_target)
            score_clean = disc(amp_c, amp_c)
            score_fake = disc(amp_hat.detach(), amp_c)
            d_loss = losses.metric_disc_loss(
                score_clean, torch.ones_like(score_clean)
            ) + losses.metric_disc_loss(score_fake, target_q)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            score_g = disc(amp_hat, amp_c)
            l_metric = losses.metric_disc_loss(score_g, torch.ones_like(score_g))

        total = recon + weights.w_metric * l_metric
        parts.update({"metric": l_metric, "d_loss": d_loss, "total": total})
        _guard_finite(total, step, parts)

        opt_g.zero_grad()
        if opt_d is not None:
            opt_d.zero_grad()
        total.backward()
        opt_g.step()
        if step % steps_per_epoch == 0:
            sched_g.step()
            if sched_d is not None:
                sched_d.step()

        record = {k: float(v) for k, v in parts.items()}
        record.update(step=step, lr=sched_g.get_last_lr()[0], wall=time.time() - t0)
        if step % tcfg.log_every == 0 or step == tcfg.max_steps:
            history.append(record)
            _append_log(tcfg.out_dir, "enhancer", record)
        if tcfg.out_dir and (step % tcfg.checkpoint_every == 0 or step == tcfg.max_steps):
            ckpt_path = save_checkpoint(
                tcfg.out_dir, "enhancer", step, "enhancer", configs,
                model, disc, opt_g, opt_d, sched_g, sched_d,
            )
        if step_callback is not None and step_callback(
            step, {"losses": record, "model": model, "discriminator": disc}
        ):
            break

    return TrainResult(model=model, discriminator=disc, history=history,
                       checkpoint_path=ckpt_path)


def _append_log(out_dir, stage: str, record: dict) -> None:
    if not out_dir:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stage}_train.log", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
