"""Global/local dual-encoder network for per-joint classification.

One encoder embeds the whole hand, a second embeds each joint patch.
Both features pass through small feed-forward projections, are
concatenated per joint, and a head MLP shared across joints maps the
fused vector to a sigmoid probability. The global feature is computed
once per image and reused for every joint.

Checkpoints are self-describing: they carry the encoder spec, the
parameter tensors, the normalization constants used at train time, and
the embeddings of 16 fixed probe images so a loader can verify that the
restored encoder actually reproduces the saved one.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import torch
import torch.nn as nn
from torchvision.models import resnet18

from .errors import CheckpointError, ConfigurationError
from .preprocess import NormStats

BACKBONES = ("resnet18", "small-cnn")
RESNET18_FEATURE_DIM = 512
PROBE_SEED = 0x50524F42  # arbitrary fixed constant; probe images never change
N_PROBE_IMAGES = 16
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    backbone: str = "resnet18"
    feature_dim: int = RESNET18_FEATURE_DIM
    ffn_dim: int = 128

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.feature_dim <= 0 or self.ffn_dim <= 0:
            raise ConfigurationError("feature_dim and ffn_dim must be positive")
        if self.backbone == "resnet18" and self.feature_dim != RESNET18_FEATURE_DIM:
            raise ConfigurationError(
                f"resnet18 produces {RESNET18_FEATURE_DIM}-d features, got feature_dim={self.feature_dim}"
            )


class SmallCNN(nn.Module):
    """Four strided conv blocks with GroupNorm and a global average pool.

    GroupNorm keeps the forward pass independent of batch composition,
    which the frozen-encoder training path relies on.
    """

    def __init__(self, feature_dim: int):
        super().__init__()
        widths = [16, 32, 64, feature_dim]
        blocks = []
        in_ch = 3
        for out_ch in widths:
            blocks += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1),
                # groups of >= 8 channels: single-channel groups would reduce
                # to InstanceNorm and erase the features once the spatial
                # extent shrinks to 1x1
                nn.GroupNorm(num_groups=max(1, out_ch // 8), num_channels=out_ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x)).flatten(1)


def make_backbone(spec: EncoderSpec) -> nn.Module:
    """Image batch (B, 3, H, W) -> feature batch (B, feature_dim)."""
    spec.validate()
    if spec.backbone == "resnet18":
        net = resnet18(weights=None)
        net.fc = nn.Identity()
        return net
    return SmallCNN(spec.feature_dim)


class FeatureNorm(nn.Module):
    """Per-dimension standardization with fixed statistics.

    Starts as the identity; `set_stats` pins mean/std measured on the
    training features. With frozen encoders this is what lets the head
    see the informative part of the features at unit scale, regardless
    of how large or flat the raw encoder outputs are.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("std", torch.ones(dim))

    @torch.no_grad()
    def set_stats(self, features: torch.Tensor) -> None:
        # Center per dimension but rescale with one shared scalar: per-dim
        # whitening would flatten the variance profile of a pretrained
        # encoder, which is exactly the part worth keeping.
        self.mean.copy_(features.mean(dim=0))
        scale = features.std(dim=0, unbiased=False).mean().clamp_min(1e-6)
        self.std.fill_(scale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


class FeedForward(nn.Module):
    """Two-layer projection applied to encoder features."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, out_dim),
            nn.GELU(),
            nn.Linear(out_dim, out_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class GlobalLocalNet(nn.Module):
    """Dual-branch network; `use_global=False` keeps only the local branch."""

    def __init__(self, spec: EncoderSpec, use_global: bool = True):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.use_global = use_global
        self.local_encoder = make_backbone(spec)
        self.local_norm = FeatureNorm(spec.feature_dim)
        self.local_ffn = FeedForward(spec.feature_dim, spec.ffn_dim)
        if use_global:
            self.global_encoder: nn.Module | None = make_backbone(spec)
            self.global_norm: nn.Module | None = FeatureNorm(spec.feature_dim)
            self.global_ffn: nn.Module | None = FeedForward(spec.feature_dim, spec.ffn_dim)
        else:
            self.global_encoder = None
            self.global_norm = None
            self.global_ffn = None
        head_in = 2 * spec.ffn_dim if use_global else spec.ffn_dim
        self.head = nn.Sequential(
            nn.Linear(head_in, spec.ffn_dim),
            nn.GELU(),
            nn.Linear(spec.ffn_dim, 1),
        )
        self.encoders_frozen = False

    def encode(self, global_images: torch.Tensor, patches: torch.Tensor) -> tuple[torch.Tensor | None, torch.Tensor]:
        """Raw encoder features: (B, F) for the hand, (B, N, F) for the patches."""
        b, n = patches.shape[:2]
        local = self.local_encoder(patches.reshape(b * n, *patches.shape[2:])).reshape(b, n, -1)
        if not self.use_global:
            return None, local
        return self.global_encoder(global_images), local

    def head_logits(self, global_features: torch.Tensor | None, local_features: torch.Tensor) -> torch.Tensor:
        """Project, fuse, and score; returns per-joint logits (B, N)."""
        b, n = local_features.shape[:2]
        local = self.local_ffn(self.local_norm(local_features.reshape(b * n, -1))).reshape(b, n, -1)
        if self.use_global:
            glob = self.global_ffn(self.global_norm(global_features))  # (B, D), shared across joints
            fused = torch.cat([glob.unsqueeze(1).expand(-1, n, -1), local], dim=-1)
        else:
            fused = local
        return self.head(fused.reshape(b * n, -1)).reshape(b, n)

    def forward(self, global_images: torch.Tensor, patches: torch.Tensor) -> torch.Tensor:
        """Per-joint probabilities (B, N), each strictly inside (0, 1)."""
        g, l = self.encode(global_images, patches)
        return torch.sigmoid(self.head_logits(g, l))

    def encoder_modules(self) -> Iterator[tuple[str, nn.Module]]:
        yield "local_encoder", self.local_encoder
        if self.global_encoder is not None:
            yield "global_encoder", self.global_encoder

    @torch.no_grad()
    def fit_feature_norms(self, global_images: torch.Tensor, patches: torch.Tensor) -> None:
        """Pin the feature standardizers to the statistics of this batch.

        Meant to be called once on the training set before the head is
        trained; the statistics then travel with the checkpoint.
        """
        was_training = self.training
        self.eval()
        g, l = self.encode(global_images, patches)
        self.local_norm.set_stats(l.reshape(-1, l.shape[-1]))
        if self.use_global:
            self.global_norm.set_stats(g)
        self.train(was_training)


def freeze_encoders(net: GlobalLocalNet) -> GlobalLocalNet:
    """Stop gradient flow into both encoders and pin them in eval mode."""
    for _, enc in net.encoder_modules():
        enc.eval()
        for p in enc.parameters():
            p.requires_grad_(False)
    net.encoders_frozen = True
    return net


def trainable_parameters(net: nn.Module) -> list[nn.Parameter]:
    return [p for p in net.parameters() if p.requires_grad]


def count_parameters(params: Iterable[nn.Parameter]) -> int:
    return sum(p.numel() for p in params)


def encoder_checksum(net: GlobalLocalNet) -> str:
    """SHA-256 over the encoder parameter bytes; changes iff encoder weights change."""
    digest = hashlib.sha256()
    for name, enc in net.encoder_modules():
        digest.update(name.encode())
        state = enc.state_dict()
        for key in sorted(state):
            digest.update(key.encode())
            digest.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def probe_images(size: int, n: int = N_PROBE_IMAGES, seed: int = PROBE_SEED) -> torch.Tensor:
    """Fixed pseudo-random probe batch (n, 3, size, size); same seed, same images."""
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, size, size), generator=gen)


def probe_embeddings(backbone: nn.Module, size: int) -> torch.Tensor:
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        emb = backbone(probe_images(size))
    backbone.train(was_training)
    return emb


def save_encoder_checkpoint(
    path: str | Path,
    backbone: nn.Module,
    spec: EncoderSpec,
    probe_size: int,
    norm_stats: NormStats | None = None,
    meta: dict | None = None,
) -> None:
    """Write a pretrained-encoder checkpoint with its probe-embedding ledger."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "encoder",
        "encoder_spec": asdict(spec),
        "backbone_state": {k: v.detach().cpu() for k, v in backbone.state_dict().items()},
        "norm_stats": asdict(norm_stats) if norm_stats is not None else None,
        "probe": {
            "seed": PROBE_SEED,
            "n": N_PROBE_IMAGES,
            "size": probe_size,
            "embeddings": probe_embeddings(backbone, probe_size),
        },
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_encoder_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except Exception as exc:  # unreadable / truncated file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if not isinstance(payload, dict) or payload.get("kind") != "encoder":
        raise CheckpointError(f"{path} is not an encoder checkpoint")
    return payload


def verify_probe_ledger(backbone: nn.Module, payload: dict, tolerance: float = 1e-5) -> float:
    """Re-embed the probe images and compare against the checkpoint's ledger.

    Returns the max absolute difference; raises if it exceeds `tolerance`.
    """
    probe = payload["probe"]
    if probe["seed"] != PROBE_SEED or probe["n"] != N_PROBE_IMAGES:
        raise CheckpointError("probe ledger was built with a different probe set")
    fresh = probe_embeddings(backbone, probe["size"])
    diff = (fresh - probe["embeddings"]).abs().max().item()
    if diff > tolerance:
        raise CheckpointError(
            f"probe embeddings differ from ledger by {diff:.3e} (> {tolerance:.0e}); "
            "the restored encoder does not match the saved one"
        )
    return diff


def _load_into(encoder: nn.Module, state: dict, group: str) -> None:
    try:
        encoder.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter group {group!r} does not fit the model: {exc}")


def load_backbone(
    net: GlobalLocalNet,
    source: str | Path = "random",
    local_source: str | Path | None = None,
) -> GlobalLocalNet:
    """Initialize the encoders from `source`.

    `source="random"` keeps the construction-time random weights. A
    checkpoint path loads the saved encoder into both branches (or into
    the global branch only, when `local_source` names a second
    checkpoint for the local branch). Projections and head keep their
    fresh initialization either way.
    """
    if source == "random":
        if local_source is not None:
            raise ConfigurationError("local_source requires a checkpoint source for the global branch")
        return net

    payload = load_encoder_checkpoint(source)
    saved_spec = EncoderSpec(**payload["encoder_spec"])
    if (saved_spec.backbone, saved_spec.feature_dim) != (net.spec.backbone, net.spec.feature_dim):
        raise CheckpointError(
            "checkpoint encoder does not match the model: "
            f"saved backbone={saved_spec.backbone!r} feature_dim={saved_spec.feature_dim}, "
            f"model backbone={net.spec.backbone!r} feature_dim={net.spec.feature_dim}"
        )

    if local_source is None:
        for group, enc in net.encoder_modules():
            _load_into(enc, payload["backbone_state"], group)
        verify_probe_ledger(net.local_encoder, payload)
    else:
        if net.global_encoder is None:
            raise ConfigurationError("model has no global branch; pass a single source instead")
        _load_into(net.global_encoder, payload["backbone_state"], "global_encoder")
        verify_probe_ledger(net.global_encoder, payload)
        local_payload = load_encoder_checkpoint(local_source)
        _load_into(net.local_encoder, local_payload["backbone_state"], "local_encoder")
        verify_probe_ledger(net.local_encoder, local_payload)
    return net


def save_model_checkpoint(
    path: str | Path,
    net: GlobalLocalNet,
    norm_stats: NormStats | None = None,
    meta: dict | None = None,
) -> None:
    """Write a full fine-tuned model checkpoint."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "model",
        "encoder_spec": asdict(net.spec),
        "use_global": net.use_global,
        "model_state": {k: v.detach().cpu() for k, v in net.state_dict().items()},
        "norm_stats": asdict(norm_stats) if norm_stats is not None else None,
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_model_checkpoint(path: str | Path) -> tuple[GlobalLocalNet, NormStats | None, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if not isinstance(payload, dict) or payload.get("kind") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    spec = EncoderSpec(**payload["encoder_spec"])
    net = GlobalLocalNet(spec, use_global=payload["use_global"])
    try:
        net.load_state_dict(payload["model_state"])
    except RuntimeError as exc:
        raise CheckpointError(f"model state does not fit the architecture: {exc}")
    stats = NormStats(**payload["norm_stats"]) if payload["norm_stats"] is not None else None
    return net, stats, payload.get("meta", {})
