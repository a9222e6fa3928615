"""Command-line surface: prepare-data, train-predictor, train-enhancer,
infer, evaluate, ablate.

Failures exit nonzero and print a machine-readable error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import dsp, pipeline, training
from .dsp import Waveform
from .enhancer import EnhancerConfig
from .losses import LossWeights
from .spectrum_predictor import PredictorConfig
from .training import TrainConfig


def _add_config_arg(p):
    p.add_argument("--config", help="flat YAML key/value overrides")


def _flat_overrides(args) -> dict:
    return pipeline.load_flat_config(args.config) if getattr(args, "config", None) else {}


def cmd_prepare_data(args):
    out_dir = Path(args.out_dir)
    manifest = data_mod.build_manifest(args.clean_dir, args.noisy_dir, split=args.split)
    processed = []
    clean_out = out_dir / "clean"
    noisy_out = out_dir / "noisy"
    clean_out.mkdir(parents=True, exist_ok=True)
    noisy_out.mkdir(parents=True, exist_ok=True)
    for pair, clean, noisy in data_mod.ingest_all(manifest):
        cpath = clean_out / f"{pair.id}.wav"
        npath = noisy_out / f"{pair.id}.wav"
        data_mod.write_wav(cpath, clean)
        data_mod.write_wav(npath, noisy)
        processed.append(
            data_mod.UtterancePair(
                id=pair.id,
                clean_path=cpath,
                noisy_path=npath,
                duration=clean.duration,
                split=pair.split,
            )
        )
    result = data_mod.Manifest(pairs=processed)
    result.save(args.manifest)
    print(f"wrote {len(processed)} pairs to {args.manifest} ({result.counts})")


def _train_common(args, stage: str) -> TrainConfig:
    tcfg = TrainConfig.toy(stage) if args.toy else TrainConfig(stage=stage)
    tcfg = replace(
        tcfg,
        max_steps=args.steps or tcfg.max_steps,
        seed=args.seed,
        out_dir=args.out_dir,
        adversarial=not args.no_adversarial,
    )
    if args.batch_size:
        tcfg = replace(tcfg, batch_size=args.batch_size)
    return pipeline.apply_flat_config(tcfg, _flat_overrides(args))


def cmd_train_predictor(args):
    overrides = _flat_overrides(args)
    manifest = data_mod.Manifest.load(args.manifest)
    pairs = [(c, n) for _, c, n in data_mod.ingest_all(
        data_mod.Manifest(pairs=manifest.split(args.split)))]
    pcfg = PredictorConfig.toy() if args.toy else PredictorConfig()
    stft_cfg = dsp.PREDICTOR_STFT
    if args.matching_stft:
        stft_cfg = dsp.ENHANCER_STFT
        pcfg = replace(pcfg, output_bins=stft_cfg.bins)
    if args.rep_apnet:
        pcfg = replace(pcfg, anti_wrap="cosine")
    pcfg = pipeline.apply_flat_config(pcfg, overrides)
    tcfg = _train_common(args, "predictor")
    weights = pipeline.apply_flat_config(LossWeights(), overrides)
    suite_cfg = None
    if args.rep_apnet:
        from .discriminators import DiscriminatorSuiteConfig

        suite_cfg = DiscriminatorSuiteConfig(variant="msd")
    result = training.train_predictor(
        pairs, pcfg, tcfg, stft_cfg=stft_cfg, weights=weights, suite_cfg=suite_cfg
    )
    print(f"trained {tcfg.max_steps} steps; checkpoint: {result.checkpoint_path}")


def cmd_train_enhancer(args):
    overrides = _flat_overrides(args)
    manifest = data_mod.Manifest.load(args.manifest)
    pairs = [(c, n) for _, c, n in data_mod.ingest_all(
        data_mod.Manifest(pairs=manifest.split(args.split)))]
    ecfg = EnhancerConfig.toy() if args.toy else EnhancerConfig()
    ecfg = pipeline.apply_flat_config(ecfg, overrides)
    tcfg = _train_common(args, "enhancer")
    weights = pipeline.apply_flat_config(LossWeights(), overrides)
    result = training.train_enhancer(pairs, ecfg, tcfg, weights=weights)
    print(f"trained {tcfg.max_steps} steps; checkpoint: {result.checkpoint_path}")


def _pipeline_config(args) -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(
        variant=args.variant,
        predictor_checkpoint=args.predictor_ckpt,
        enhancer_checkpoint=args.enhancer_ckpt,
    )


def cmd_infer(args):
    cfg = _pipeline_config(args)
    predictor, enhancer = pipeline.load_pipeline_models(cfg)
    inp = Path(args.input)
    if inp.suffix == ".npy":
        values = np.load(inp)
        mel = dsp.MelSpectrogram(values=values, config=cfg.predictor_stft,
                                 n_mels=values.shape[1])
        out = pipeline.denoise(mel, predictor, enhancer, cfg)
    else:
        noisy = data_mod.resample(data_mod.read_wav(inp), data_mod.TARGET_SR)
        out = pipeline.denoise_waveform(noisy, predictor, enhancer, cfg)
    data_mod.write_wav(args.output, out)
    print(f"wrote {args.output} ({out.duration:.2f} s)")


def cmd_evaluate(args):
    manifest = data_mod.Manifest.load(args.manifest)
    cfg = None
    if not args.identity_noisy:
        cfg = _pipeline_config(args)
    report = pipeline.evaluate_checkpoint(
        manifest,
        cfg,
        split=args.split,
        identity_noisy=args.identity_noisy,
        limit=args.limit,
    )
    if args.report:
        report.save(args.report)
    print(report.render_table())


def cmd_ablate(args):
    manifest = data_mod.Manifest.load(args.manifest)

    def _split_pair(text, flag):
        parts = text.split(",")
        if len(parts) != 2:
            raise ValueError(f"{flag} expects 'predictor.pt,enhancer.pt'")
        return parts[0], parts[1]

    checkpoints = {
        "proposed": _split_pair(args.proposed, "--proposed"),
        "rep_apnet": _split_pair(args.rep_apnet, "--rep-apnet"),
        "matching_stft": _split_pair(args.matching_stft, "--matching-stft"),
    }
    reports = pipeline.ablate(manifest, checkpoints, split=args.split, limit=args.limit)
    table = pipeline.render_ablation_table(reports)
    if args.report:
        payload = {
            variant: {"means": rep.means, "per_utterance": rep.per_utterance}
            for variant, rep in reports.items()
        }
        with open(args.report, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="denvoc",
        description="Two-stage neural denoising vocoder (noisy mel -> clean waveform)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="pair, resample and manifest a corpus")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--noisy-dir", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_prepare_data)

    for stage in ("predictor", "enhancer"):
        p = sub.add_parser(f"train-{stage}", help=f"train the {stage} stage")
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="train")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--toy", action="store_true", help="desk-scale preset")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--seed", type=int, default=1234)
        p.add_argument("--no-adversarial", action="store_true")
        _add_config_arg(p)
        if stage == "predictor":
            p.add_argument("--rep-apnet", action="store_true",
                           help="legacy ablation: multi-scale critics + cosine phase loss")
            p.add_argument("--matching-stft", action="store_true",
                           help="train stage 1 under the enhancement stage's STFT config")
            p.set_defaults(func=cmd_train_predictor)
        else:
            p.set_defaults(func=cmd_train_enhancer)

    p = sub.add_parser("infer", help="denoise one WAV or mel (.npy) file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--variant", default="proposed", choices=pipeline.VARIANTS)
    p.add_argument("--predictor-ckpt", required=True)
    p.add_argument("--enhancer-ckpt", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score a checkpoint (or the noisy input) on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--identity-noisy", action="store_true",
                   help="score the untreated noisy signals against the clean references")
    p.add_argument("--variant", default="proposed", choices=pipeline.VARIANTS)
    p.add_argument("--predictor-ckpt", default=None)
    p.add_argument("--enhancer-ckpt", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run all three variants and tabulate the metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--proposed", required=True, metavar="PRED,ENH")
    p.add_argument("--rep-apnet", dest="rep_apnet", required=True, metavar="PRED,ENH")
    p.add_argument("--matching-stft", dest="matching_stft", required=True,
                   metavar="PRED,ENH")
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
