"""Fold-wise evaluation and the ablation grid.

Per-joint decisions are pooled over a fold's whole test split before
computing metrics (micro pooling), then metric values are averaged
across folds with equal weight (macro aggregation). All rate-style
metrics define 0/0 as 0, which matters constantly under heavy class
imbalance: a fold with no predicted positives has precision 0, not NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigurationError
from .finetune import FocalLossConfig, TrainConfig, encode_labels, finetune, predict
from .folds import FoldPlan
from .manifest import DatasetManifest
from .model import EncoderSpec, GlobalLocalNet, load_backbone
from .preprocess import CropSpec, compute_norm_stats, prepare_dataset
from .pretrain import DistillConfig, load_corpus, pretrain_encoder

ABSENT = -1


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ConfigurationError("confusion counts must be nonnegative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp, fp=self.fp + other.fp, tn=self.tn + other.tn, fn=self.fn + other.fn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(probs: torch.Tensor, labels: torch.Tensor, threshold: float = 0.5) -> ConfusionCounts:
    """Pool thresholded decisions against labels; entries labeled ABSENT are skipped.

    A prediction is positive iff its probability is >= threshold.
    """
    if not (0.0 < threshold < 1.0):
        raise ConfigurationError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    if probs.shape != labels.shape:
        raise ConfigurationError(f"probs shape {tuple(probs.shape)} != labels shape {tuple(labels.shape)}")
    mask = labels != ABSENT
    pred = probs[mask] >= threshold
    truth = labels[mask] == 1
    return ConfusionCounts(
        tp=int((pred & truth).sum()),
        fp=int((pred & ~truth).sum()),
        tn=int((~pred & ~truth).sum()),
        fn=int((~pred & truth).sum()),
    )


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass(frozen=True)
class MetricSet:
    recall: float
    precision: float
    f1: float
    gmean: float

    def as_dict(self) -> dict[str, float]:
        return {"recall": self.recall, "precision": self.precision, "f1": self.f1, "gmean": self.gmean}


def metrics(counts: ConfusionCounts) -> MetricSet:
    """Recall, precision, F1, and the geometric mean of recall and specificity."""
    recall = _safe_div(counts.tp, counts.tp + counts.fn)
    precision = _safe_div(counts.tp, counts.tp + counts.fp)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    specificity = _safe_div(counts.tn, counts.tn + counts.fp)
    return MetricSet(recall=recall, precision=precision, f1=f1, gmean=math.sqrt(recall * specificity))


@dataclass(frozen=True)
class Variant:
    """One row of the ablation: which ingredients stay on."""

    key: str
    label: str
    pretrain: bool
    loss: str
    use_global: bool


VARIANTS: dict[str, Variant] = {
    "ours": Variant("ours", "Ours", pretrain=True, loss="focal", use_global=True),
    "no_pretrain": Variant("no_pretrain", "w/o DINO pre-training", pretrain=False, loss="focal", use_global=True),
    "no_focal": Variant("no_focal", "w/o Focal Loss", pretrain=True, loss="bce", use_global=True),
    "local_only": Variant("local_only", "w/o Global/Local Encoder", pretrain=True, loss="focal", use_global=False),
}


@dataclass
class FoldResult:
    fold: int
    counts: ConfusionCounts
    metric_values: MetricSet


@dataclass
class EvalReport:
    variant: str
    label: str
    threshold: float
    per_fold: list[FoldResult] = field(default_factory=list)

    @property
    def aggregate(self) -> MetricSet:
        """Unweighted mean of each metric across folds."""
        n = len(self.per_fold)
        if n == 0:
            raise ConfigurationError("report has no folds")
        return MetricSet(
            recall=sum(f.metric_values.recall for f in self.per_fold) / n,
            precision=sum(f.metric_values.precision for f in self.per_fold) / n,
            f1=sum(f.metric_values.f1 for f in self.per_fold) / n,
            gmean=sum(f.metric_values.gmean for f in self.per_fold) / n,
        )

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "label": self.label,
            "threshold": self.threshold,
            "per_fold": [
                {
                    "fold": f.fold,
                    "counts": {"tp": f.counts.tp, "fp": f.counts.fp, "tn": f.counts.tn, "fn": f.counts.fn},
                    "metrics": f.metric_values.as_dict(),
                }
                for f in self.per_fold
            ],
            "aggregate": self.aggregate.as_dict(),
        }


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _install_backbone(net: GlobalLocalNet, backbone: torch.nn.Module) -> None:
    state = backbone.state_dict()
    for _, enc in net.encoder_modules():
        enc.load_state_dict(state)


def evaluate_fold(
    manifest: DatasetManifest,
    fold_plan: FoldPlan,
    fold: int,
    *,
    crop_spec: CropSpec,
    encoder_spec: EncoderSpec,
    train_config: TrainConfig,
    loss_config: FocalLossConfig,
    distill_config: DistillConfig | None = None,
    pretrain_checkpoint: str | Path | None = None,
    variant: Variant = VARIANTS["ours"],
    threshold: float = 0.5,
    seed: int = 0,
) -> FoldResult:
    """Train on the fold's train patients, score its held-out patients.

    Pretraining weights come from `pretrain_checkpoint` when given;
    otherwise, a variant that wants pretraining runs it on the fold's
    own training images (never on test patients).
    """
    train_recs = manifest.records_for_patients(fold_plan.train_patients(fold))
    test_recs = manifest.records_for_patients(fold_plan.test_patients(fold))
    if not train_recs or not test_recs:
        raise ConfigurationError(f"fold {fold} has an empty split")

    stats = compute_norm_stats(train_recs, crop_spec)
    train_samples = prepare_dataset(train_recs, crop_spec, stats, manifest=manifest)
    test_samples = prepare_dataset(test_recs, crop_spec, stats, manifest=manifest)

    fold_seed = _fold_seed(seed, fold)
    torch.manual_seed(fold_seed)
    net = GlobalLocalNet(encoder_spec, use_global=variant.use_global)
    if variant.pretrain:
        if pretrain_checkpoint is not None:
            load_backbone(net, pretrain_checkpoint)
        else:
            if distill_config is None:
                raise ConfigurationError("variant wants pretraining but no checkpoint or distill config was given")
            corpus = load_corpus([r.image_path for r in train_recs])
            backbone, _ = pretrain_encoder(corpus, encoder_spec, distill_config, seed=fold_seed)
            _install_backbone(net, backbone)

    fold_train_config = replace(train_config, loss=variant.loss, seed=fold_seed)
    finetune(net, train_samples, fold_train_config, loss_config)

    probs = predict(net, test_samples)
    labels = torch.stack([encode_labels(s.labels) for s in test_samples])
    counts = confusion(probs, labels, threshold)
    return FoldResult(fold=fold, counts=counts, metric_values=metrics(counts))


def crossval_evaluate(
    manifest: DatasetManifest,
    fold_plan: FoldPlan,
    *,
    crop_spec: CropSpec,
    encoder_spec: EncoderSpec,
    train_config: TrainConfig,
    loss_config: FocalLossConfig,
    distill_config: DistillConfig | None = None,
    pretrain_checkpoint: str | Path | None = None,
    variant: str = "ours",
    threshold: float = 0.5,
    seed: int = 0,
) -> EvalReport:
    """Full patient-disjoint cross-validation for one variant."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    spec = VARIANTS[variant]
    report = EvalReport(variant=spec.key, label=spec.label, threshold=threshold)
    for fold in range(fold_plan.n_folds):
        report.per_fold.append(
            evaluate_fold(
                manifest,
                fold_plan,
                fold,
                crop_spec=crop_spec,
                encoder_spec=encoder_spec,
                train_config=train_config,
                loss_config=loss_config,
                distill_config=distill_config,
                pretrain_checkpoint=pretrain_checkpoint,
                variant=spec,
                threshold=threshold,
                seed=seed,
            )
        )
    return report


def run_ablation(
    manifest: DatasetManifest,
    fold_plan: FoldPlan,
    *,
    crop_spec: CropSpec,
    encoder_spec: EncoderSpec,
    train_config: TrainConfig,
    loss_config: FocalLossConfig,
    distill_config: DistillConfig | None = None,
    pretrain_checkpoint: str | Path | None = None,
    variants: Sequence[str] = ("ours", "no_pretrain", "no_focal", "local_only"),
    threshold: float = 0.5,
    seed: int = 0,
) -> list[EvalReport]:
    """Cross-validate every requested variant with shared folds and seed."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigurationError(f"unknown variants {unknown}; expected a subset of {sorted(VARIANTS)}")
    return [
        crossval_evaluate(
            manifest,
            fold_plan,
            crop_spec=crop_spec,
            encoder_spec=encoder_spec,
            train_config=train_config,
            loss_config=loss_config,
            distill_config=distill_config,
            pretrain_checkpoint=pretrain_checkpoint,
            variant=v,
            threshold=threshold,
            seed=seed,
        )
        for v in variants
    ]
