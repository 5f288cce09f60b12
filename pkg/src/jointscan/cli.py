"""Command-line entry points.

Each subcommand is one stage of the pipeline and writes its artifacts
under `<run-root>/<run-id>/<stage>/`, next to a resolved copy of the
configuration and a `hashes.json` recording the SHA-256 of the stage's
inputs and outputs. Later stages find earlier artifacts in the same run
directory by convention, so the plain chain

    jointscan synth && jointscan pretrain && jointscan crossval && jointscan ablate

works with no flags at all (and doubles as the smoke test). Flags or
config keys override any of the wiring.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .config import ExperimentConfig, apply_test_mode, derive_seed, load_config, resolved_config_yaml
from .errors import ConfigurationError, JointscanError
from .evaluate import VARIANTS, EvalReport, confusion, crossval_evaluate, evaluate_fold, metrics, run_ablation
from .finetune import encode_labels, predict
from .folds import FoldPlan, load_fold_plan, make_folds, save_fold_plan
from .manifest import load_manifest
from .model import GlobalLocalNet, load_backbone, load_model_checkpoint, save_model_checkpoint
from .preprocess import compute_norm_stats, prepare_dataset
from .pretrain import load_corpus, pretrain_encoder
from .report import (
    render_metric_bars,
    write_aggregate_table,
    write_fold_report,
    write_folds_table,
    write_summary_json,
)
from .synth import generate_dataset

STAGES = ("synth", "pretrain", "finetune", "evaluate", "crossval", "ablate")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _stage_dir(args: argparse.Namespace, config: ExperimentConfig, stage: str) -> Path:
    root = Path(args.run_root or os.environ.get("JOINTSCAN_RUN_ROOT", "runs"))
    stage_dir = root / (args.run_id or config.run_id) / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    return stage_dir


def _write_stage_metadata(stage_dir: Path, config: ExperimentConfig, inputs: dict, outputs: list[Path]) -> None:
    (stage_dir / "resolved_config.yaml").write_text(resolved_config_yaml(config), encoding="utf-8")
    hashes = {
        "inputs": inputs,
        "outputs": {str(p.relative_to(stage_dir)): _sha256(p) for p in outputs if p.is_file()},
    }
    (stage_dir / "hashes.json").write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_dir(stage_dir: Path) -> Path:
    return stage_dir.parent


def _resolve_manifest_path(args: argparse.Namespace, config: ExperimentConfig, stage_dir: Path) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if config.data.manifest:
        return Path(config.data.manifest)
    candidate = _run_dir(stage_dir) / "synth" / "dataset" / "manifest.jsonl"
    if candidate.is_file():
        return candidate
    raise ConfigurationError(
        "no manifest: pass --manifest, set data.manifest, or run the synth stage first"
    )


def _resolve_encoder_checkpoint(args: argparse.Namespace, config: ExperimentConfig, stage_dir: Path) -> Path | None:
    flag = getattr(args, "encoder", None)
    if flag == "random":
        return None
    if flag:
        return Path(flag)
    if config.pretrain.checkpoint:
        return Path(config.pretrain.checkpoint)
    candidate = _run_dir(stage_dir) / "pretrain" / "encoder.pt"
    if candidate.is_file():
        return candidate
    return None


def _fold_plan_for(args: argparse.Namespace, config: ExperimentConfig, manifest) -> FoldPlan:
    if getattr(args, "fold_plan", None):
        return load_fold_plan(args.fold_plan)
    return make_folds(manifest, n_folds=config.data.n_folds, seed=derive_seed(config.seed, "folds"))


def cmd_synth(args: argparse.Namespace, config: ExperimentConfig) -> int:
    stage_dir = _stage_dir(args, config, "synth")
    out_dir = Path(args.out) if args.out else stage_dir / "dataset"
    manifest = generate_dataset(config.synth, out_dir)
    outputs = [out_dir / "manifest.jsonl", out_dir / "ledger.jsonl"]
    _write_stage_metadata(stage_dir, config, {"seed": config.synth.seed}, outputs)
    print(f"wrote {len(manifest.records)} records to {out_dir / 'manifest.jsonl'}")
    return 0


def cmd_pretrain(args: argparse.Namespace, config: ExperimentConfig) -> int:
    stage_dir = _stage_dir(args, config, "pretrain")
    if args.corpus or config.pretrain.corpus:
        corpus_src: Path | list = Path(args.corpus or config.pretrain.corpus)
        corpus_desc = str(corpus_src)
    else:
        manifest = load_manifest(_resolve_manifest_path(args, config, stage_dir))
        corpus_src = [r.image_path for r in manifest.records]
        corpus_desc = f"{len(corpus_src)} manifest images"
    corpus = load_corpus(corpus_src)
    ckpt = Path(args.out) if args.out else stage_dir / "encoder.pt"
    _, result = pretrain_encoder(
        corpus,
        config.model.encoder_spec(),
        config.pretrain.distill,
        seed=derive_seed(config.seed, "pretrain"),
        checkpoint_path=ckpt,
        log_path=stage_dir / "runlog.jsonl",
    )
    _write_stage_metadata(stage_dir, config, {"corpus": corpus_desc}, [ckpt, stage_dir / "runlog.jsonl"])
    status = "collapsed" if result.collapsed else "ok"
    print(f"pretrained encoder -> {ckpt} (final loss {result.epoch_losses[-1]:.4f}, {status})")
    return 0


def cmd_finetune(args: argparse.Namespace, config: ExperimentConfig) -> int:
    stage_dir = _stage_dir(args, config, "finetune")
    manifest_path = _resolve_manifest_path(args, config, stage_dir)
    manifest = load_manifest(manifest_path)
    plan = _fold_plan_for(args, config, manifest)
    save_fold_plan(plan, stage_dir / "fold_plan.json")
    variant = VARIANTS[args.variant]

    from .evaluate import _fold_seed, _install_backbone  # shared fold seeding/backbone install

    train_recs = manifest.records_for_patients(plan.train_patients(args.fold))
    stats = compute_norm_stats(train_recs, config.crop)
    train_samples = prepare_dataset(train_recs, config.crop, stats, manifest=manifest)

    seed = _fold_seed(derive_seed(config.seed, "finetune"), args.fold)
    torch.manual_seed(seed)
    net = GlobalLocalNet(config.model.encoder_spec(), use_global=variant.use_global)
    encoder_ckpt = _resolve_encoder_checkpoint(args, config, stage_dir)
    if variant.pretrain and encoder_ckpt is not None:
        load_backbone(net, encoder_ckpt)
    elif variant.pretrain and config.pretrain.enabled:
        corpus = load_corpus([r.image_path for r in train_recs])
        backbone, _ = pretrain_encoder(corpus, config.model.encoder_spec(), config.pretrain.distill, seed=seed)
        _install_backbone(net, backbone)

    from dataclasses import replace

    from .finetune import finetune as run_finetune

    train_config = replace(config.finetune.train, loss=variant.loss, seed=seed)
    result = run_finetune(
        net, train_samples, train_config, config.finetune.focal, log_path=stage_dir / f"runlog_fold{args.fold}.jsonl"
    )
    ckpt = Path(args.out) if args.out else stage_dir / f"model_fold{args.fold}.pt"
    save_model_checkpoint(ckpt, net, norm_stats=stats, meta={"fold": args.fold, "variant": variant.key, "seed": seed})
    _write_stage_metadata(
        stage_dir,
        config,
        {"manifest": _sha256(manifest_path), "fold": args.fold, "variant": variant.key},
        [ckpt, stage_dir / f"runlog_fold{args.fold}.jsonl", stage_dir / "fold_plan.json"],
    )
    print(f"fine-tuned fold {args.fold} -> {ckpt} (final loss {result.epoch_losses[-1]:.4f})")
    return 0


def cmd_evaluate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    stage_dir = _stage_dir(args, config, "evaluate")
    manifest_path = _resolve_manifest_path(args, config, stage_dir)
    manifest = load_manifest(manifest_path)
    plan = _fold_plan_for(args, config, manifest)

    model_path = Path(args.model) if args.model else _run_dir(stage_dir) / "finetune" / f"model_fold{args.fold}.pt"
    net, stats, meta = load_model_checkpoint(model_path)
    if stats is None:
        raise ConfigurationError(f"checkpoint {model_path} carries no normalization constants")

    test_recs = manifest.records_for_patients(plan.test_patients(args.fold))
    test_samples = prepare_dataset(test_recs, config.crop, stats, manifest=manifest)
    probs = predict(net, test_samples)
    labels = torch.stack([encode_labels(s.labels) for s in test_samples])
    counts = confusion(probs, labels, config.eval.threshold)
    m = metrics(counts)

    from .evaluate import FoldResult

    report = EvalReport(variant=meta.get("variant", "ours"), label=meta.get("variant", "ours"),
                        threshold=config.eval.threshold)
    report.per_fold = [FoldResult(fold=args.fold, counts=counts, metric_values=m)]
    csv_path = write_fold_report(report, args.fold, stage_dir / f"fold_{args.fold}.csv")
    json_path = write_summary_json([report], stage_dir / f"fold_{args.fold}.json")
    _write_stage_metadata(
        stage_dir, config, {"manifest": _sha256(manifest_path), "model": _sha256(model_path)}, [csv_path, json_path]
    )
    print(
        f"fold {args.fold}: recall={m.recall:.3f} precision={m.precision:.3f} f1={m.f1:.3f} gmean={m.gmean:.3f}"
    )
    return 0


def _report_outputs(stage_dir: Path, reports: list[EvalReport], config: ExperimentConfig) -> list[Path]:
    outputs = []
    for report in reports:
        name = report.variant
        outputs.append(write_folds_table(report, stage_dir / f"folds_{name}.csv"))
        for fold_result in report.per_fold:
            outputs.append(write_fold_report(report, fold_result.fold, stage_dir / f"fold_{name}_{fold_result.fold}.csv"))
    outputs.append(write_aggregate_table(reports, stage_dir / "aggregate.csv"))
    outputs.append(write_summary_json(reports, stage_dir / "summary.json"))
    if config.eval.plots:
        outputs.extend(render_metric_bars(reports, stage_dir))
    return outputs


def cmd_crossval(args: argparse.Namespace, config: ExperimentConfig) -> int:
    stage_dir = _stage_dir(args, config, "crossval")
    manifest_path = _resolve_manifest_path(args, config, stage_dir)
    manifest = load_manifest(manifest_path)
    plan = _fold_plan_for(args, config, manifest)
    save_fold_plan(plan, stage_dir / "fold_plan.json")
    encoder_ckpt = _resolve_encoder_checkpoint(args, config, stage_dir)

    report = crossval_evaluate(
        manifest,
        plan,
        crop_spec=config.crop,
        encoder_spec=config.model.encoder_spec(),
        train_config=config.finetune.train,
        loss_config=config.finetune.focal,
        distill_config=config.pretrain.distill if config.pretrain.enabled else None,
        pretrain_checkpoint=encoder_ckpt,
        variant=args.variant,
        threshold=config.eval.threshold,
        seed=derive_seed(config.seed, "eval"),
    )
    outputs = _report_outputs(stage_dir, [report], config) + [stage_dir / "fold_plan.json"]
    _write_stage_metadata(stage_dir, config, {"manifest": _sha256(manifest_path)}, outputs)
    agg = report.aggregate
    print(
        f"{report.label}: recall={agg.recall:.3f} precision={agg.precision:.3f} "
        f"f1={agg.f1:.3f} gmean={agg.gmean:.3f}"
    )
    return 0


def cmd_ablate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    stage_dir = _stage_dir(args, config, "ablate")
    manifest_path = _resolve_manifest_path(args, config, stage_dir)
    manifest = load_manifest(manifest_path)
    plan = _fold_plan_for(args, config, manifest)
    save_fold_plan(plan, stage_dir / "fold_plan.json")
    encoder_ckpt = _resolve_encoder_checkpoint(args, config, stage_dir)

    reports = run_ablation(
        manifest,
        plan,
        crop_spec=config.crop,
        encoder_spec=config.model.encoder_spec(),
        train_config=config.finetune.train,
        loss_config=config.finetune.focal,
        distill_config=config.pretrain.distill if config.pretrain.enabled else None,
        pretrain_checkpoint=encoder_ckpt,
        variants=tuple(config.eval.variants),
        threshold=config.eval.threshold,
        seed=derive_seed(config.seed, "eval"),
    )
    outputs = _report_outputs(stage_dir, reports, config) + [stage_dir / "fold_plan.json"]
    ablation_csv = write_aggregate_table(reports, stage_dir / "ablation.csv")
    outputs.append(ablation_csv)
    _write_stage_metadata(stage_dir, config, {"manifest": _sha256(manifest_path)}, outputs)
    for report in reports:
        agg = report.aggregate
        print(f"{report.label}: recall={agg.recall:.3f} precision={agg.precision:.3f} "
              f"f1={agg.f1:.3f} gmean={agg.gmean:.3f}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key, e.g. --set finetune.train.epochs=3")
    parser.add_argument("--run-id", help="run identifier (default from config)")
    parser.add_argument("--run-root", help="root directory for run artifacts "
                                           "(default $JOINTSCAN_RUN_ROOT or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointscan", description="Per-joint hand inflammation pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", help="dataset directory (default <run>/synth/dataset)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-distillation pretraining of the encoder")
    _add_common(p)
    p.add_argument("--corpus", help="directory of unlabeled images")
    p.add_argument("--manifest", help="use this manifest's images as the corpus")
    p.add_argument("--out", help="checkpoint path (default <run>/pretrain/encoder.pt)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the fusion layers on one fold")
    _add_common(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--manifest")
    p.add_argument("--fold-plan", help="JSON fold plan (default: derived from config seed)")
    p.add_argument("--encoder", help="encoder checkpoint, or 'random' for random init")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="ours")
    p.add_argument("--out", help="model checkpoint path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a fine-tuned model on its held-out fold")
    _add_common(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--model", help="model checkpoint (default <run>/finetune/model_fold<K>.pt)")
    p.add_argument("--manifest")
    p.add_argument("--fold-plan")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="full cross-validation for one variant")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--fold-plan")
    p.add_argument("--encoder", help="encoder checkpoint, or 'random'")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="ours")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("ablate", help="cross-validate every ablation variant")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--fold-plan")
    p.add_argument("--encoder")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        if args.run_id:
            import dataclasses

            config = dataclasses.replace(config, run_id=args.run_id)
        apply_test_mode(config)
        return args.func(args, config)
    except JointscanError as exc:
        print(f"error: command={args.command} kind={type(exc).__name__} detail={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
