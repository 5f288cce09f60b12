"""Supervised fine-tuning of the fusion layers under class imbalance.

The loss is a focal variant of binary cross-entropy on the predicted
probabilities:

    L = -(1/M) * sum_i [ y_i * (1 - p_i)^gamma * log(p_i)
                         + (1 - y_i) * p_i^gamma * log(1 - p_i) ]

where M counts only the labeled joint entries; unlabeled joints
contribute nothing, to the loss or to M. gamma = 0 recovers plain BCE;
gamma > 0 shrinks the contribution of already-confident predictions so
the rare positives keep mattering. Probabilities are clamped to
[eps, 1 - eps] before the logs.

With frozen encoders (the default), only the projection FFNs and the
shared head receive gradient.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .errors import ConfigurationError, NumericalError, UndefinedLossError
from .model import GlobalLocalNet, encoder_checksum, freeze_encoders, trainable_parameters
from .preprocess import PreparedSample

LOSS_KINDS = ("focal", "bce")
ABSENT = -1  # label value marking "not assessed"


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    epsilon: float = 1e-7
    alpha: float | None = None  # optional positive-class weight; off by default

    def validate(self) -> None:
        if self.gamma < 0:
            raise ConfigurationError("gamma must be nonnegative")
        if not (0.0 < self.epsilon <= 1e-4):
            raise ConfigurationError("epsilon must lie in (0, 1e-4]")
        if self.alpha is not None and not (0.0 < self.alpha < 1.0):
            raise ConfigurationError("alpha must lie in (0, 1) when set")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    loss: str = "focal"
    freeze_encoders: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")


def encode_labels(labels: Sequence[int | None]) -> torch.Tensor:
    """Optional labels -> int tensor where missing entries are ABSENT (-1)."""
    return torch.tensor([ABSENT if y is None else int(y) for y in labels], dtype=torch.long)


def focal_loss(probs: torch.Tensor, labels: torch.Tensor, config: FocalLossConfig = FocalLossConfig()) -> torch.Tensor:
    """Mean focal loss over the labeled entries of `probs`.

    `labels` matches `probs` in shape; entries equal to ABSENT are
    skipped. Raises UndefinedLossError when nothing is labeled — the
    caller is expected to skip such batches.
    """
    config.validate()
    if probs.shape != labels.shape:
        raise ConfigurationError(f"probs shape {tuple(probs.shape)} != labels shape {tuple(labels.shape)}")
    mask = labels != ABSENT
    if not bool(mask.any()):
        raise UndefinedLossError("no labeled entries in batch; loss is undefined")
    p = probs[mask].clamp(config.epsilon, 1.0 - config.epsilon)
    y = labels[mask].to(p.dtype)
    pos = y * (1.0 - p) ** config.gamma * torch.log(p)
    neg = (1.0 - y) * p**config.gamma * torch.log(1.0 - p)
    if config.alpha is not None:
        pos = pos * config.alpha
        neg = neg * (1.0 - config.alpha)
    return -(pos + neg).mean()


def _collate(samples: Sequence[PreparedSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    globals_ = torch.stack([s.global_image for s in samples])
    patches = torch.stack([s.local_patches for s in samples])
    labels = torch.stack([encode_labels(s.labels) for s in samples])
    return globals_, patches, labels


@torch.no_grad()
def _fit_feature_norms(net: GlobalLocalNet, samples: Sequence[PreparedSample], batch_size: int) -> None:
    """Standardize encoder features against the training set.

    Pretrained encoders tend to emit features with a large shared
    component and small per-dimension spread; without this the head
    barely sees them.
    """
    was_training = net.training
    net.eval()
    g_feats, l_feats = [], []
    for start in range(0, len(samples), batch_size):
        globals_, patches, _ = _collate(samples[start : start + batch_size])
        g, l = net.encode(globals_, patches)
        l_feats.append(l.reshape(-1, l.shape[-1]))
        if g is not None:
            g_feats.append(g)
    net.local_norm.set_stats(torch.cat(l_feats))
    if net.use_global:
        net.global_norm.set_stats(torch.cat(g_feats))
    net.train(was_training)


@dataclass
class FinetuneResult:
    net: GlobalLocalNet
    epoch_losses: list[float] = field(default_factory=list)
    log_records: list[dict] = field(default_factory=list)


def finetune(
    net: GlobalLocalNet,
    train_samples: Sequence[PreparedSample],
    config: TrainConfig = TrainConfig(),
    loss_config: FocalLossConfig = FocalLossConfig(),
    log_path: str | Path | None = None,
) -> FinetuneResult:
    """Adam on the trainable parameters; encoders stay fixed by default.

    Each batch stacks whole hands; the loss averages over that batch's
    labeled joint entries. Batches with no labels at all are skipped.
    The per-epoch log records the loss, the learning rate, and the
    encoder checksum, which must not move while the encoders are frozen.
    """
    config.validate()
    loss_config.validate()
    if not train_samples:
        raise ConfigurationError("training set is empty")
    if config.loss == "bce":
        loss_config = FocalLossConfig(gamma=0.0, epsilon=loss_config.epsilon, alpha=loss_config.alpha)

    if config.freeze_encoders:
        freeze_encoders(net)
    _fit_feature_norms(net, train_samples, config.batch_size)
    params = trainable_parameters(net)
    if not params:
        raise ConfigurationError("no trainable parameters left after freezing")
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)

    result = FinetuneResult(net=net)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = torch.randperm(len(train_samples), generator=gen).tolist()
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            globals_, patches, labels = _collate(batch)
            if bool((labels == ABSENT).all()):
                continue
            probs = net(globals_, patches)
            loss = focal_loss(probs, labels, loss_config)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {start // config.batch_size}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        if not epoch_losses:
            raise UndefinedLossError("every batch in the epoch was unlabeled")
        mean_loss = sum(epoch_losses) / len(epoch_losses)
        result.epoch_losses.append(mean_loss)
        result.log_records.append(
            {
                "epoch": epoch,
                "loss": mean_loss,
                "lr": config.learning_rate,
                "encoder_checksum": encoder_checksum(net),
                "wall_time_s": round(time.perf_counter() - t0, 3),
            }
        )

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in result.log_records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return result


@torch.no_grad()
def predict(net: GlobalLocalNet, samples: Sequence[PreparedSample], batch_size: int = 16) -> torch.Tensor:
    """Per-joint probabilities for many samples, shape (len(samples), N)."""
    was_training = net.training
    net.eval()
    chunks = []
    for start in range(0, len(samples), batch_size):
        globals_, patches, _ = _collate(samples[start : start + batch_size])
        chunks.append(net(globals_, patches))
    net.train(was_training)
    return torch.cat(chunks) if chunks else torch.empty(0, 0)
