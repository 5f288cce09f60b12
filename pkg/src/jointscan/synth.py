"""Procedural generator for labeled synthetic hand images.

Each image is a stylized hand silhouette (palm ellipse, wrist stub, five
capsule fingers) on a dark background. Patient identity is encoded in the
base geometry (finger lengths, angles, palm shape, skin tone), so splits
that separate patients are a real generalization test. A joint labeled 1
gets a reddish, brighter disk of radius ``marker_radius_px`` centered at
its landmark; clutter adds visually similar blobs away from the joints.

Everything is a pure function of ``SynthConfig.seed``: patient geometry
streams from ``(seed, patient)``, per-image jitter/noise/clutter from
``(seed, patient, week, lane)`` seed sequences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError
from .joints import ALL_JOINTS, DEFAULT_EXCLUSIONS, Finger, JointId, JointLevel, active_joints
from .manifest import DatasetManifest, HandImageRecord, save_manifest

SKIN_BASE = np.array([0.30, 0.24, 0.20])
BACKGROUND_COLOR = np.array([0.10, 0.11, 0.13])
# Per-channel gain of the inflammation marker: brightens and shifts toward red.
MARKER_COLOR_GAIN = np.array([1.00, 0.65, 0.55])
MARKER_EDGE_PX = 2.0
PIXEL_NOISE = 0.02
SHADING_AMPLITUDE = 0.04
# Per-image white-balance wobble: each photo gets an independent per-channel
# gain in [1 - LIGHTING_TINT, 1 + LIGHTING_TINT]. Global color statistics
# therefore vary more between photos than a faint marker shifts them, while
# the disk-vs-annulus contrast the detector relies on only scales by the
# same bounded gain.
LIGHTING_TINT = 0.12

# Whole-hand translation jitter (+-2 px per axis) plus finger-angle jitter
# keeps any landmark within this distance of its per-patient base position.
LANDMARK_JITTER_BOUND_PX = 6.0

# Clutter blobs keep this many marker radii away from every landmark so the
# zero-clutter detector contract stays meaningful.
CLUTTER_CLEARANCE_FACTOR = 2.8
MAX_CLUTTER_BLOBS = 10

# (x offset on palm top in palm_rx units, y offset in palm_ry units,
#  lean from vertical in degrees, segment lengths as fractions of H)
# MCP positions are spread so neighboring joints sit >= ~12 px apart at the
# default 128 px canvas: marker paint (radius + rolloff) must not reach into
# a neighboring joint's detector disk.
_FINGER_LAYOUT = {
    Finger.INDEX: (0.78, -0.82, 16.0, (0.155, 0.105, 0.080)),
    Finger.MIDDLE: (0.27, -0.94, 5.0, (0.175, 0.115, 0.085)),
    Finger.RING: (-0.25, -0.88, -7.0, (0.165, 0.110, 0.080)),
    Finger.LITTLE: (-0.76, -0.70, -20.0, (0.125, 0.085, 0.065)),
}
_THUMB_ANGLE_DEG = 52.0
_THUMB_LENGTHS = (0.115, 0.085)  # MCP->IP, IP->tip, fractions of H
# Capsule half-widths per segment (proximal, middle, distal), fraction of min(W, H).
_FINGER_HALF_WIDTHS = (0.042, 0.036, 0.030)
_THUMB_HALF_WIDTHS = (0.050, 0.042)
_KNUCKLE_BAR_HALF_WIDTH = 0.060


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 16
    images_per_patient: int = 2
    image_size: tuple[int, int] = (128, 128)  # (width, height)
    prevalence: float | dict[int, float] = 0.05
    marker_intensity: float = 0.6
    marker_radius_px: int = 5
    background_clutter: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1 or self.images_per_patient < 1:
            raise ConfigurationError("n_patients and images_per_patient must be >= 1")
        width, height = self.image_size
        if min(width, height) < 48:
            raise ConfigurationError(f"image_size too small: {self.image_size}")
        if not 0.0 < self.marker_intensity <= 1.0:
            raise ConfigurationError(f"marker_intensity must be in (0, 1], got {self.marker_intensity}")
        if self.marker_radius_px < 1 or self.marker_radius_px >= min(width, height) / 4:
            raise ConfigurationError(
                f"marker_radius_px must be in [1, min(image dims)/4), got {self.marker_radius_px}"
            )
        if not 0.0 <= self.background_clutter <= 1.0:
            raise ConfigurationError("background_clutter must be in [0, 1]")
        for joint in ALL_JOINTS:
            p = self.prevalence_for(joint)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"prevalence for {joint} must be in [0, 1], got {p}")

    def prevalence_for(self, joint: JointId) -> float:
        if isinstance(self.prevalence, dict):
            return float(self.prevalence.get(joint.index, 0.0))
        return float(self.prevalence)


def patient_seed_for(config_seed: int, patient_index: int) -> int:
    """Stable integer seed for one patient's base geometry."""
    return int(np.random.SeedSequence([config_seed, patient_index]).generate_state(1)[0])


def _unit(angle_from_vertical_deg: float) -> np.ndarray:
    """Direction pointing 'up' on the image, leaned by the given angle (+ = +x)."""
    a = math.radians(angle_from_vertical_deg)
    return np.array([math.sin(a), -math.cos(a)])


def _segment_mask(xs: np.ndarray, ys: np.ndarray, p0: np.ndarray, p1: np.ndarray, half_width: float) -> np.ndarray:
    """Boolean capsule: grid points within half_width of segment p0-p1."""
    d = p1 - p0
    len_sq = float(d @ d)
    if len_sq == 0.0:
        dist_sq = (xs - p0[0]) ** 2 + (ys - p0[1]) ** 2
        return dist_sq <= half_width**2
    t = ((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / len_sq
    t = np.clip(t, 0.0, 1.0)
    cx = p0[0] + t * d[0]
    cy = p0[1] + t * d[1]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= half_width**2


def _patient_params(patient_seed: int, config: SynthConfig) -> dict:
    width, height = config.image_size
    rng = np.random.default_rng(np.random.SeedSequence([patient_seed]))
    params = {
        "palm_center": np.array(
            [
                width * (0.50 + rng.uniform(-0.02, 0.02)),
                height * (0.71 + rng.uniform(-0.015, 0.015)),
            ]
        ),
        "palm_rx": 0.190 * width * rng.uniform(0.94, 1.06),
        "palm_ry": 0.150 * height * rng.uniform(0.94, 1.06),
        "tone": SKIN_BASE + rng.uniform(-0.03, 0.03, size=3),
        "finger_scale": {f: rng.uniform(0.88, 1.10) for f in _FINGER_LAYOUT},
        "finger_angle_jitter": {f: rng.uniform(-4.0, 4.0) for f in _FINGER_LAYOUT},
        "thumb_angle": _THUMB_ANGLE_DEG + rng.uniform(-5.0, 5.0),
        "thumb_scale": rng.uniform(0.90, 1.08),
    }
    return params


def _hand_layout(params: dict, config: SynthConfig, image_rng: np.random.Generator) -> tuple[list, dict]:
    """Segments (p0, p1, half_width) and float landmark positions, with per-image jitter."""
    width, height = config.image_size
    scale = min(width, height)
    offset = image_rng.uniform(-1.2, 1.2, size=2)
    finger_jitter = {f: image_rng.uniform(-0.5, 0.5) for f in _FINGER_LAYOUT}
    thumb_jitter = image_rng.uniform(-0.5, 0.5)

    center = params["palm_center"] + offset
    rx, ry = params["palm_rx"], params["palm_ry"]

    segments: list[tuple[np.ndarray, np.ndarray, float]] = []
    landmarks: dict[tuple[Finger, JointLevel], np.ndarray] = {}

    # wrist stub reaching the bottom border
    wrist_end = np.array([center[0], height + 8.0])
    segments.append((center.copy(), wrist_end, 0.115 * width))

    for finger, (xoff, yoff, angle, lengths) in _FINGER_LAYOUT.items():
        a = angle + params["finger_angle_jitter"][finger] + finger_jitter[finger]
        u = _unit(a)
        s = params["finger_scale"][finger]
        mcp = center + np.array([xoff * rx, yoff * ry])
        pip = mcp + u * (lengths[0] * s * height)
        dip = pip + u * (lengths[1] * s * height)
        tip = dip + u * (lengths[2] * s * height)
        for p0, p1, hw in zip((mcp, pip, dip), (pip, dip, tip), _FINGER_HALF_WIDTHS):
            segments.append((p0, p1, hw * scale))
        landmarks[(finger, JointLevel.MCP)] = mcp
        landmarks[(finger, JointLevel.PIP)] = pip
        landmarks[(finger, JointLevel.DIP)] = dip

    # knuckle bar keeps the spread MCP row connected to the palm
    segments.append(
        (
            landmarks[(Finger.LITTLE, JointLevel.MCP)],
            landmarks[(Finger.INDEX, JointLevel.MCP)],
            _KNUCKLE_BAR_HALF_WIDTH * scale,
        )
    )

    # thumb: MCP at the palm edge, IP at PIP level, no DIP
    a = params["thumb_angle"] + thumb_jitter
    u = _unit(a)
    s = params["thumb_scale"]
    mcp = center + np.array([1.05 * rx, -0.12 * ry])
    ip = mcp + u * (_THUMB_LENGTHS[0] * s * height)
    tip = ip + u * (_THUMB_LENGTHS[1] * s * height)
    segments.append((center + np.array([0.55 * rx, -0.12 * ry]), mcp, 0.055 * scale))
    for p0, p1, hw in zip((mcp, ip), (ip, tip), _THUMB_HALF_WIDTHS):
        segments.append((p0, p1, hw * scale))
    landmarks[(Finger.THUMB, JointLevel.MCP)] = mcp
    landmarks[(Finger.THUMB, JointLevel.PIP)] = ip

    return segments, {"center": center, "rx": rx, "ry": ry, "landmarks": landmarks}


def _soften(img: np.ndarray, passes: int = 3) -> np.ndarray:
    """Separable [1,2,1]/4 blur; widens silhouette edges like slight defocus."""
    for _ in range(passes):
        p = np.pad(img, ((1, 1), (0, 0), (0, 0)), mode="edge")
        img = (p[:-2] + 2.0 * p[1:-1] + p[2:]) / 4.0
        p = np.pad(img, ((0, 0), (1, 1), (0, 0)), mode="edge")
        img = (p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]) / 4.0
    return img


def _disk_profile(xs: np.ndarray, ys: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """1 inside the disk, cosine-free linear rolloff over MARKER_EDGE_PX, 0 beyond."""
    d = np.sqrt((xs - center[0]) ** 2 + (ys - center[1]) ** 2)
    return np.clip((radius + MARKER_EDGE_PX - d) / MARKER_EDGE_PX, 0.0, 1.0) * (d <= radius + MARKER_EDGE_PX)


def render_hand(
    patient_seed: int,
    labels: dict[int, int],
    config: SynthConfig,
    hand_side: str = "right",
    image_seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, dict[int, tuple[int, int]]]:
    """Render one hand image.

    Returns ``(image, mask, landmarks)``: image is HxWx3 uint8, mask is
    HxW uint8 (0 or 255), landmarks map all 14 joint indices to integer
    (x, y) pixel coordinates. Markers are painted exactly for the joints
    whose label is 1; label bits never influence random draws, so two
    renders differing only in labels differ only inside marker disks.
    """
    config.validate()
    width, height = config.image_size
    params = _patient_params(patient_seed, config)

    jitter_rng = np.random.default_rng(np.random.SeedSequence([patient_seed, image_seed, 0]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([patient_seed, image_seed, 1]))
    clutter_rng = np.random.default_rng(np.random.SeedSequence([patient_seed, image_seed, 2]))

    segments, palm = _hand_layout(params, config, jitter_rng)

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    center, rx, ry = palm["center"], palm["rx"], palm["ry"]
    mask = ((xs - center[0]) / rx) ** 2 + ((ys - center[1]) / ry) ** 2 <= 1.0
    for p0, p1, hw in segments:
        mask |= _segment_mask(xs, ys, p0, p1, hw)

    if hand_side == "left":
        mask = mask[:, ::-1]
        flip = lambda p: np.array([width - 1.0 - p[0], p[1]])  # noqa: E731
    elif hand_side == "right":
        flip = lambda p: p  # noqa: E731
    else:
        raise ConfigurationError(f"hand_side must be 'left' or 'right', got {hand_side!r}")

    landmarks_f = {
        joint.index: flip(palm["landmarks"][(joint.finger, joint.level)]) for joint in ALL_JOINTS
    }
    landmarks = {
        idx: (
            int(np.clip(np.rint(p[0]), 3, width - 4)),
            int(np.clip(np.rint(p[1]), 3, height - 4)),
        )
        for idx, p in landmarks_f.items()
    }

    img = np.tile(BACKGROUND_COLOR, (height, width, 1))
    shade_center = flip(center) + noise_rng.uniform(-2.5, 2.5, size=2)
    d = np.sqrt((xs - shade_center[0]) ** 2 + (ys - shade_center[1]) ** 2)
    shading = SHADING_AMPLITUDE * (1.0 - d / d.max())
    img[mask] = params["tone"][None, :] + shading[mask, None]
    img = _soften(img)
    img += noise_rng.uniform(-PIXEL_NOISE, PIXEL_NOISE, size=img.shape)

    clearance = CLUTTER_CLEARANCE_FACTOR * config.marker_radius_px
    n_blobs = int(clutter_rng.binomial(MAX_CLUTTER_BLOBS, config.background_clutter))
    hand_px = np.argwhere(mask)  # (y, x) rows
    for _ in range(n_blobs):
        blob = _place_clutter_blob(clutter_rng, hand_px, landmarks, clearance)
        if blob is None:
            continue
        radius = config.marker_radius_px * clutter_rng.uniform(0.8, 1.2)
        gain = config.marker_intensity * clutter_rng.uniform(0.7, 1.0)
        img += gain * _disk_profile(xs, ys, blob, radius)[..., None] * MARKER_COLOR_GAIN

    for idx, label in labels.items():
        if label != 1:
            continue
        c = np.array(landmarks[idx], dtype=np.float64)
        profile = _disk_profile(xs, ys, c, float(config.marker_radius_px))
        img += config.marker_intensity * profile[..., None] * MARKER_COLOR_GAIN

    tint = 1.0 + noise_rng.uniform(-LIGHTING_TINT, LIGHTING_TINT, size=3)
    img *= tint[None, None, :]

    image_u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    mask_u8 = (mask.astype(np.uint8)) * 255
    return image_u8, mask_u8, landmarks


def _place_clutter_blob(
    rng: np.random.Generator,
    hand_px: np.ndarray,
    landmarks: dict[int, tuple[int, int]],
    clearance: float,
) -> np.ndarray | None:
    """Pick a point on the hand at least ``clearance`` px from every landmark."""
    points = np.array([(x, y) for x, y in landmarks.values()], dtype=np.float64)
    for _ in range(50):
        y, x = hand_px[int(rng.integers(len(hand_px)))]
        c = np.array([float(x), float(y)])
        if np.min(np.sqrt(((points - c) ** 2).sum(axis=1))) >= clearance:
            return c
    return None


def marker_contrast(
    image: np.ndarray,
    mask: np.ndarray,
    center: tuple[int, int],
    radius: int,
    other_landmarks: tuple[tuple[int, int], ...] = (),
) -> float:
    """Mean grayscale intensity in the marker disk minus the surrounding annulus.

    Both means are restricted to hand pixels; annulus pixels that could
    carry a neighboring joint's marker (within radius + rolloff of one of
    ``other_landmarks``) are excluded. This is the generator's documented
    detector: with zero clutter, contrast >= marker_intensity/2 identifies
    a marked joint.
    """
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    d = np.sqrt((xs - center[0]) ** 2 + (ys - center[1]) ** 2)
    on_hand = mask > 0
    gray = image.astype(np.float64).mean(axis=2) / 255.0
    disk = on_hand & (d <= radius)
    annulus = on_hand & (d >= 1.6 * radius) & (d <= 2.6 * radius)
    paint_reach = radius + MARKER_EDGE_PX
    for ox, oy in other_landmarks:
        od = np.sqrt((xs - ox) ** 2 + (ys - oy) ** 2)
        annulus &= od > paint_reach
    if not disk.any() or not annulus.any():
        return 0.0
    return float(gray[disk].mean() - gray[annulus].mean())


def detect_labels(
    image: np.ndarray,
    mask: np.ndarray,
    landmarks: dict[int, tuple[int, int]],
    joints: tuple[JointId, ...],
    config: SynthConfig,
) -> dict[int, int]:
    """Threshold the disk/annulus contrast at marker_intensity/2 for each joint."""
    threshold = config.marker_intensity / 2.0
    out = {}
    for j in joints:
        others = tuple(landmarks[k.index] for k in joints if k.index != j.index)
        contrast = marker_contrast(image, mask, landmarks[j.index], config.marker_radius_px, others)
        out[j.index] = int(contrast >= threshold)
    return out


def generate_dataset(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write images, masks, a manifest, and a ground-truth ledger under out_dir.

    Per-joint labels are drawn independently per image at the configured
    prevalence. The ledger (``ledger.jsonl``) records each image's true
    labels and marker centers for downstream verification.
    """
    config.validate()
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    masks_dir = out_dir / "masks"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)

    joints = active_joints(DEFAULT_EXCLUSIONS)
    side_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1_000_003]))

    records: list[HandImageRecord] = []
    ledger_lines: list[str] = []
    for p in range(config.n_patients):
        patient_id = f"p{p:03d}"
        pseed = patient_seed_for(config.seed, p)
        hand_side = "left" if side_rng.random() < 0.5 else "right"
        for week in range(config.images_per_patient):
            label_rng = np.random.default_rng(np.random.SeedSequence([config.seed, p, week, 3]))
            labels = {j.index: int(label_rng.random() < config.prevalence_for(j)) for j in joints}
            image, mask, landmarks = render_hand(
                pseed, labels, config, hand_side=hand_side, image_seed=week
            )
            stem = f"{patient_id}_w{week:02d}"
            image_path = images_dir / f"{stem}.png"
            mask_path = masks_dir / f"{stem}.png"
            Image.fromarray(image).save(image_path)
            Image.fromarray(mask).save(mask_path)

            records.append(
                HandImageRecord(
                    image_path=image_path,
                    patient_id=patient_id,
                    hand_side=hand_side,
                    capture_week=week,
                    landmarks=landmarks,
                    labels=labels,
                    mask_path=mask_path,
                )
            )
            ledger_lines.append(
                json.dumps(
                    {
                        "image_path": f"images/{stem}.png",
                        "patient_id": patient_id,
                        "capture_week": week,
                        "labels": {str(k): labels[k] for k in sorted(labels)},
                        "marker_centers": {
                            str(k): list(landmarks[k]) for k in sorted(labels) if labels[k] == 1
                        },
                    },
                    sort_keys=True,
                )
            )

    manifest = DatasetManifest(records=tuple(records), joint_exclusions=DEFAULT_EXCLUSIONS)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    (out_dir / "ledger.jsonl").write_text("\n".join(ledger_lines) + "\n", encoding="utf-8")
    return manifest


def load_ledger(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
