"""Label-free encoder pretraining by self-distillation.

A student and a momentum teacher see different random crops of the same
image. The teacher's sharpened, centered prototype distribution on the
two global crops is the target for the student's distribution on every
other view. The teacher is never trained directly: its weights are an
exponential moving average of the student's, and the running center is
an EMA of teacher prototype logits. Both tricks exist to keep the
student from collapsing onto a single prototype.

All randomness (crop geometry, flips, jitter, batch order) is drawn
from one `torch.Generator`, so a fixed seed reproduces the run exactly.
"""

from __future__ import annotations

import copy
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericalError
from .model import EncoderSpec, make_backbone, save_encoder_checkpoint
from .preprocess import NormStats, load_image, normalize

COLLAPSE_STD_THRESHOLD = 0.01


@dataclass(frozen=True)
class DistillConfig:
    n_prototypes: int = 256
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    ema_momentum: float = 0.996
    n_global_crops: int = 2
    n_local_crops: int = 4
    global_crop_scale: tuple[float, float] = (0.5, 1.0)
    local_crop_scale: tuple[float, float] = (0.2, 0.5)
    global_crop_px: int = 64
    local_crop_px: int = 32
    epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 1.5e-4
    weight_decay: float = 0.04
    warmup_steps: int = 10
    grad_clip: float = 3.0
    augment: bool = True

    def validate(self) -> None:
        if self.n_prototypes < 2:
            raise ConfigurationError("n_prototypes must be at least 2")
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ConfigurationError("temperatures must be positive")
        if not (0.0 <= self.center_momentum < 1.0) or not (0.0 <= self.ema_momentum < 1.0):
            raise ConfigurationError("momenta must lie in [0, 1)")
        if self.n_global_crops != 2:
            raise ConfigurationError("exactly two global crops are required")
        if self.n_local_crops < 1:
            raise ConfigurationError("need at least one local crop")
        for lo, hi in (self.global_crop_scale, self.local_crop_scale):
            if not (0.0 < lo <= hi <= 1.0):
                raise ConfigurationError("crop scale ranges must satisfy 0 < lo <= hi <= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


class DistillHead(nn.Module):
    """Projection from encoder features onto prototype logits.

    Three-layer MLP, L2 normalization of the bottleneck, then a linear
    layer whose rows are renormalized to unit length at every forward
    pass — the prototype logits are cosine similarities scaled by the
    row norm's removal.
    """

    def __init__(self, in_dim: int, n_prototypes: int, hidden_dim: int = 256, bottleneck_dim: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.prototypes = nn.Linear(bottleneck_dim, n_prototypes, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = F.normalize(self.mlp(x), dim=-1)
        weight = F.normalize(self.prototypes.weight, dim=-1)
        return F.linear(z, weight)


class DistillModel(nn.Module):
    """Backbone plus projection head; `embed` exposes raw features."""

    def __init__(self, spec: EncoderSpec, config: DistillConfig):
        super().__init__()
        self.backbone = make_backbone(spec)
        self.head = DistillHead(spec.feature_dim, config.n_prototypes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def _rand_uniform(gen: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=gen).item()


def _random_resized_crop(
    image: torch.Tensor, scale: tuple[float, float], out_px: int, gen: torch.Generator
) -> torch.Tensor:
    """Square crop covering a random area fraction, resized to out_px."""
    _, h, w = image.shape
    frac = _rand_uniform(gen, scale[0], scale[1])
    side = max(1, min(min(h, w), int(round(math.sqrt(frac) * min(h, w)))))
    top = int(torch.randint(0, h - side + 1, (), generator=gen))
    left = int(torch.randint(0, w - side + 1, (), generator=gen))
    window = image[:, top : top + side, left : left + side]
    return F.interpolate(window.unsqueeze(0), size=(out_px, out_px), mode="bilinear", align_corners=False).squeeze(0)


_BLUR_KERNEL = torch.tensor([1.0, 2.0, 1.0]) / 4.0


def _gaussian_blur3(image: torch.Tensor) -> torch.Tensor:
    k = _BLUR_KERNEL.to(image.dtype)
    x = image.unsqueeze(0)
    x = F.conv2d(x, k.view(1, 1, 3, 1).expand(3, 1, 3, 1), padding=(1, 0), groups=3)
    x = F.conv2d(x, k.view(1, 1, 1, 3).expand(3, 1, 1, 3), padding=(0, 1), groups=3)
    return x.squeeze(0)


def _augment(image: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Flip plus mild photometric jitter; hue is left alone on purpose."""
    if torch.rand((), generator=gen) < 0.5:
        image = torch.flip(image, dims=[-1])
    contrast = _rand_uniform(gen, 0.9, 1.1)
    brightness = _rand_uniform(gen, -0.08, 0.08)
    image = (image - image.mean()) * contrast + image.mean() + brightness
    saturation = _rand_uniform(gen, 0.9, 1.1)
    gray = image.mean(dim=0, keepdim=True)
    image = gray + (image - gray) * saturation
    if torch.rand((), generator=gen) < 0.3:
        image = _gaussian_blur3(image)
    return image.clamp(0.0, 1.0)


def multi_crop(
    image: torch.Tensor, config: DistillConfig, gen: torch.Generator
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Two global views and `n_local_crops` local views of one raw image.

    With `augment=False` and a degenerate scale range of (1.0, 1.0) on a
    square image, every view is just the resized original.
    """
    globals_, locals_ = [], []
    for _ in range(config.n_global_crops):
        v = _random_resized_crop(image, config.global_crop_scale, config.global_crop_px, gen)
        globals_.append(_augment(v, gen) if config.augment else v)
    for _ in range(config.n_local_crops):
        v = _random_resized_crop(image, config.local_crop_scale, config.local_crop_px, gen)
        locals_.append(_augment(v, gen) if config.augment else v)
    return globals_, locals_


def distill_loss(
    student_logits: Sequence[torch.Tensor],
    teacher_logits: Sequence[torch.Tensor],
    center: torch.Tensor,
    student_temp: float,
    teacher_temp: float,
) -> torch.Tensor:
    """Cross-entropy from teacher targets to student views, averaged over pairs.

    `student_logits` holds one (B, K) tensor per view, the first
    len(teacher_logits) of which are the same crops the teacher saw; a
    teacher view is never matched against the student's copy of itself.
    Teacher targets are centered and sharpened, and detached so no
    gradient reaches the teacher or the center.
    """
    total = 0.0
    n_pairs = 0
    for iq, t_logits in enumerate(teacher_logits):
        q = F.softmax((t_logits.detach() - center) / teacher_temp, dim=-1)
        for v, s_logits in enumerate(student_logits):
            if v == iq:
                continue
            log_p = F.log_softmax(s_logits / student_temp, dim=-1)
            total = total + torch.sum(-q * log_p, dim=-1).mean()
            n_pairs += 1
    if n_pairs == 0:
        raise ConfigurationError("no valid teacher/student view pairs (every view was a self pair)")
    return total / n_pairs


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s, elementwise; buffers are copied."""
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        pt.mul_(momentum).add_(ps, alpha=1.0 - momentum)
    for bt, bs in zip(teacher.buffers(), student.buffers()):
        bt.copy_(bs)


@torch.no_grad()
def center_update(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    """c <- lambda * c + (1 - lambda) * batch mean of teacher logits."""
    return center * momentum + teacher_logits.mean(dim=0) * (1.0 - momentum)


@torch.no_grad()
def collapse_statistic(embeddings: torch.Tensor) -> float:
    """Mean over feature dimensions of the per-dimension std across a batch."""
    return embeddings.std(dim=0, unbiased=False).mean().item()


def load_corpus(source: Sequence[str | Path] | str | Path) -> list[torch.Tensor]:
    """Image paths (or a directory of png/jpg files) -> list of (3, H, W) tensors."""
    if isinstance(source, (str, Path)):
        root = Path(source)
        paths = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    else:
        paths = [Path(p) for p in source]
    if not paths:
        raise ConfigurationError(f"pretraining corpus is empty: {source}")
    return [load_image(p) for p in paths]


def corpus_norm_stats(images: Sequence[torch.Tensor]) -> NormStats:
    stacked_means = torch.stack([img.mean(dim=(1, 2)) for img in images]).mean(dim=0)
    sq = torch.stack([(img**2).mean(dim=(1, 2)) for img in images]).mean(dim=0)
    std = torch.clamp((sq - stacked_means**2).clamp(min=1e-12).sqrt(), min=1e-6)
    return NormStats(mean=tuple(stacked_means.tolist()), std=tuple(std.tolist()))


@dataclass
class PretrainResult:
    checkpoint_path: Path | None
    norm_stats: NormStats
    epoch_losses: list[float] = field(default_factory=list)
    collapse_stats: list[float] = field(default_factory=list)
    collapsed: bool = False


def pretrain_encoder(
    corpus: Sequence[torch.Tensor],
    spec: EncoderSpec,
    config: DistillConfig,
    seed: int = 0,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> tuple[nn.Module, PretrainResult]:
    """Run the self-distillation loop and return the teacher backbone.

    The teacher — the EMA of the student — is what downstream training
    loads, mirroring the convention that the averaged weights are the
    better representation. Writes one structured log record per epoch
    (epoch, loss, collapse statistic, wall time) when `log_path` is set.
    """
    config.validate()
    if not corpus:
        raise ConfigurationError("pretraining corpus is empty")

    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    stats = corpus_norm_stats(corpus)
    student = DistillModel(spec, config)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    student.train()
    teacher.eval()

    optimizer = torch.optim.AdamW(student.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    center = torch.zeros(config.n_prototypes)

    # Held-out view of the corpus for the collapse statistic: the teacher
    # backbone should keep spreading these embeddings apart.
    probe_batch = torch.stack(
        [
            normalize(
                F.interpolate(
                    img.unsqueeze(0), size=(config.global_crop_px,) * 2, mode="bilinear", align_corners=False
                ).squeeze(0),
                stats,
            )
            for img in corpus[:64]
        ]
    )

    log_records = []
    result = PretrainResult(checkpoint_path=None, norm_stats=stats)
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = torch.randperm(len(corpus), generator=gen).tolist()
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            global_views: list[list[torch.Tensor]] = [[] for _ in range(config.n_global_crops)]
            local_views: list[list[torch.Tensor]] = [[] for _ in range(config.n_local_crops)]
            for i in batch_idx:
                g_crops, l_crops = multi_crop(corpus[i], config, gen)
                for slot, crop in zip(global_views, g_crops):
                    slot.append(normalize(crop, stats))
                for slot, crop in zip(local_views, l_crops):
                    slot.append(normalize(crop, stats))
            g_batches = [torch.stack(v) for v in global_views]
            l_batches = [torch.stack(v) for v in local_views]

            student_logits = [student(b) for b in g_batches] + [student(b) for b in l_batches]
            with torch.no_grad():
                teacher_logits = [teacher(b) for b in g_batches]

            loss = distill_loss(student_logits, teacher_logits, center, config.student_temp, config.teacher_temp)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite distillation loss at epoch {epoch}, step {step}")

            lr_scale = min(1.0, (step + 1) / config.warmup_steps) if config.warmup_steps > 0 else 1.0
            for group in optimizer.param_groups:
                group["lr"] = config.learning_rate * lr_scale
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(student.parameters(), config.grad_clip)
            optimizer.step()

            ema_update(teacher, student, config.ema_momentum)
            center = center_update(center, torch.cat([t for t in teacher_logits]), config.center_momentum)
            epoch_losses.append(loss.item())
            step += 1

        mean_loss = sum(epoch_losses) / len(epoch_losses)
        spread = collapse_statistic(teacher.embed(probe_batch))
        result.epoch_losses.append(mean_loss)
        result.collapse_stats.append(spread)
        if spread < COLLAPSE_STD_THRESHOLD:
            result.collapsed = True
            warnings.warn(
                f"teacher embeddings are collapsing (std {spread:.4f} < {COLLAPSE_STD_THRESHOLD}) "
                f"at epoch {epoch}; continuing",
                RuntimeWarning,
            )
        log_records.append(
            {
                "epoch": epoch,
                "loss": mean_loss,
                "collapse_stat": spread,
                "collapsed": spread < COLLAPSE_STD_THRESHOLD,
                "wall_time_s": round(time.perf_counter() - t0, 3),
            }
        )

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in log_records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    if checkpoint_path is not None:
        save_encoder_checkpoint(
            checkpoint_path,
            teacher.backbone,
            spec,
            probe_size=config.global_crop_px,
            norm_stats=stats,
            meta={"epochs": config.epochs, "seed": seed, "final_loss": result.epoch_losses[-1]},
        )
        result.checkpoint_path = Path(checkpoint_path)

    return teacher.backbone, result
