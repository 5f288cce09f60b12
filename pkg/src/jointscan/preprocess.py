"""Turns a manifest record into network-ready tensors.

The pipeline is: zero the background with the precomputed mask, resize
the whole hand to the model input size, crop one square window per
active joint from the *original-resolution* masked image (centered on
the joint landmark), resize each window to the model input size, and
normalize everything with per-channel constants frozen from the
training split.

Images are float32 channel-first tensors; raw pixel values live in
[0, 1] before normalization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError, ValidationError
from .joints import JointId
from .manifest import DatasetManifest, HandImageRecord

PADDING_POLICIES = ("zero_pad", "clamp")


@dataclass(frozen=True)
class CropSpec:
    patch_size_px: int = 64
    model_input_px: int = 224
    padding_policy: str = "zero_pad"

    def validate(self) -> None:
        if self.patch_size_px <= 0 or self.model_input_px <= 0:
            raise ConfigurationError("patch_size_px and model_input_px must be positive")
        if self.patch_size_px > self.model_input_px:
            raise ConfigurationError(
                f"patch_size_px ({self.patch_size_px}) must be <= model_input_px ({self.model_input_px})"
            )
        if self.padding_policy not in PADDING_POLICIES:
            raise ConfigurationError(f"padding_policy must be one of {PADDING_POLICIES}")


@dataclass(frozen=True)
class NormStats:
    """Per-channel affine normalization constants (computed on a training split)."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def as_tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return (
            torch.tensor(self.mean, dtype=torch.float32).view(3, 1, 1),
            torch.tensor(self.std, dtype=torch.float32).view(3, 1, 1),
        )


IDENTITY_STATS = NormStats(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))


@dataclass
class PreparedSample:
    """One record's tensors: a global view plus one patch per active joint."""

    global_image: torch.Tensor  # (3, S, S), normalized
    local_patches: torch.Tensor  # (N, 3, S, S), normalized, canonical joint order
    joint_ids: tuple[JointId, ...]
    labels: tuple[int | None, ...]
    patient_id: str

    @property
    def n_joints(self) -> int:
        return len(self.joint_ids)


class LandmarkProvider(Protocol):
    """Source of landmarks and masks for a record.

    The default implementation reads the precomputed values stored in the
    manifest; a live landmark/segmentation detector can be plugged in by
    implementing this interface.
    """

    def landmarks_for(self, record: HandImageRecord) -> dict[int, tuple[int, int]]: ...

    def mask_for(self, record: HandImageRecord) -> torch.Tensor | None: ...


class ManifestProvider:
    """Landmarks/masks straight from the manifest record."""

    def landmarks_for(self, record: HandImageRecord) -> dict[int, tuple[int, int]]:
        return record.landmarks

    def mask_for(self, record: HandImageRecord) -> torch.Tensor | None:
        if record.mask_path is None:
            return None
        return load_mask(record.mask_path)


def load_image(path: str | Path) -> torch.Tensor:
    """8-bit RGB file -> float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_mask(path: str | Path) -> torch.Tensor:
    """Single-channel mask file -> uint8 (H, W), nonzero = hand."""
    with Image.open(path) as im:
        arr = np.array(im.convert("L"), dtype=np.uint8)
    return torch.from_numpy(arr)


def apply_mask(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero every channel outside the mask (mask > 0 keeps the pixel)."""
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValidationError(
            f"mask dimensions {tuple(mask.shape[-2:])} do not match image {tuple(image.shape[-2:])}"
        )
    return image * (mask > 0).to(image.dtype)


def resize_bilinear(image: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of (3, H, W) or (N, 3, H, W) to a square `size`."""
    batched = image.dim() == 4
    x = image if batched else image.unsqueeze(0)
    out = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return out if batched else out.squeeze(0)


def _crop_window(image: torch.Tensor, cx: int, cy: int, side: int, policy: str) -> torch.Tensor:
    """Square window with rows/cols [c - side//2, c - side//2 + side)."""
    _, h, w = image.shape
    x0 = cx - side // 2
    y0 = cy - side // 2
    if policy == "clamp":
        x0 = min(max(x0, 0), max(w - side, 0))
        y0 = min(max(y0, 0), max(h - side, 0))
    xs0, ys0 = max(x0, 0), max(y0, 0)
    xs1, ys1 = min(x0 + side, w), min(y0 + side, h)
    window = image.new_zeros((image.shape[0], side, side))
    if xs1 > xs0 and ys1 > ys0:
        window[:, ys0 - y0 : ys1 - y0, xs0 - x0 : xs1 - x0] = image[:, ys0:ys1, xs0:xs1]
    return window


def crop_joint_patches(
    image: torch.Tensor,
    landmarks: dict[int, tuple[int, int]],
    spec: CropSpec,
    active: Sequence[JointId],
) -> torch.Tensor:
    """One patch_size_px window per joint, resized to model_input_px.

    Windows are taken from the original-resolution image; borders follow
    the spec's padding policy. Returns (N, 3, S, S) in canonical order.
    """
    spec.validate()
    windows = []
    for joint in active:
        cx, cy = landmarks[joint.index]
        windows.append(_crop_window(image, int(cx), int(cy), spec.patch_size_px, spec.padding_policy))
    stacked = torch.stack(windows)
    if spec.patch_size_px == spec.model_input_px:
        return stacked
    return resize_bilinear(stacked, spec.model_input_px)


def compute_norm_stats(records: Sequence[HandImageRecord], spec: CropSpec,
                       provider: LandmarkProvider | None = None) -> NormStats:
    """Per-channel mean/std of masked, resized global images of a training split."""
    if not records:
        raise ConfigurationError("cannot compute normalization stats from zero records")
    provider = provider or ManifestProvider()
    total = torch.zeros(3, dtype=torch.float64)
    total_sq = torch.zeros(3, dtype=torch.float64)
    n_px = 0
    for rec in records:
        img = load_image(rec.image_path)
        mask = provider.mask_for(rec)
        if mask is not None:
            img = apply_mask(img, mask)
        img = resize_bilinear(img, spec.model_input_px).to(torch.float64)
        total += img.sum(dim=(1, 2))
        total_sq += (img**2).sum(dim=(1, 2))
        n_px += img.shape[1] * img.shape[2]
    mean = total / n_px
    var = torch.clamp(total_sq / n_px - mean**2, min=1e-12)
    std = torch.clamp(var.sqrt(), min=1e-6)
    return NormStats(mean=tuple(mean.tolist()), std=tuple(std.tolist()))


def normalize(image: torch.Tensor, stats: NormStats) -> torch.Tensor:
    mean, std = stats.as_tensors()
    return (image - mean) / std


def denormalize(image: torch.Tensor, stats: NormStats) -> torch.Tensor:
    mean, std = stats.as_tensors()
    return image * std + mean


def prepare_sample(
    record: HandImageRecord,
    spec: CropSpec,
    stats: NormStats = IDENTITY_STATS,
    manifest: DatasetManifest | None = None,
    provider: LandmarkProvider | None = None,
) -> PreparedSample:
    """Full record -> tensor pipeline; joint order follows the canonical ordering."""
    spec.validate()
    provider = provider or ManifestProvider()
    active = manifest.active_joints if manifest is not None else _default_active()

    image = load_image(record.image_path)
    mask = provider.mask_for(record)
    if mask is not None:
        image = apply_mask(image, mask)
    landmarks = provider.landmarks_for(record)

    global_image = normalize(resize_bilinear(image, spec.model_input_px), stats)
    patches = normalize(crop_joint_patches(image, landmarks, spec, active), stats)
    labels = tuple(record.label_for(j) for j in active)
    return PreparedSample(
        global_image=global_image,
        local_patches=patches,
        joint_ids=tuple(active),
        labels=labels,
        patient_id=record.patient_id,
    )


def _default_active() -> tuple[JointId, ...]:
    from .joints import DEFAULT_EXCLUSIONS, active_joints

    return active_joints(DEFAULT_EXCLUSIONS)


def prepare_dataset(
    records: Sequence[HandImageRecord],
    spec: CropSpec,
    stats: NormStats,
    manifest: DatasetManifest | None = None,
    cache_dir: str | Path | None = None,
    cache_tag: str | None = None,
) -> list[PreparedSample]:
    """Prepare many records, optionally caching the tensor list on disk.

    The cache key ties together the record set, the crop spec, and the
    normalization constants, so a stale cache can never be reused.
    """
    if cache_dir is not None:
        key = _cache_key(records, spec, stats, cache_tag)
        cache_path = Path(cache_dir) / f"prepared_{key}.pt"
        if cache_path.is_file():
            return torch.load(cache_path, weights_only=False)
    samples = [prepare_sample(rec, spec, stats, manifest=manifest) for rec in records]
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        torch.save(samples, cache_path)
    return samples


def _cache_key(
    records: Sequence[HandImageRecord], spec: CropSpec, stats: NormStats, tag: str | None
) -> str:
    payload = json.dumps(
        {
            "records": [str(r.image_path) for r in records],
            "spec": [spec.patch_size_px, spec.model_input_px, spec.padding_policy],
            "stats": [list(stats.mean), list(stats.std)],
            "tag": tag,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
