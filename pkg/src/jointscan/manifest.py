"""Dataset manifest: record schema, JSON-lines I/O, and validation.

A manifest is a line-delimited text file. The first line is a header
object carrying ``schema_version`` and ``joint_exclusions``; every
following line is one record object:

    {"schema_version": 1, "joint_exclusions": ["DIP"]}
    {"image_path": "images/p000_w00.png", "patient_id": "p000",
     "hand_side": "right", "capture_week": 0,
     "mask_path": "masks/p000_w00.png",
     "landmarks": {"0": [34, 120], ...},     # all 14 joints, px, origin top-left
     "labels": {"0": 0, "3": 1}}             # only assessed joints appear

Relative paths are resolved against the manifest's directory. Landmark
coordinates are integer pixels. Labels are 0/1 and may be absent for a
joint (unassessed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from PIL import Image

from .errors import SchemaError, ValidationError
from .joints import (
    ALL_JOINTS,
    DEFAULT_EXCLUSIONS,
    JointId,
    JointLevel,
    N_JOINTS,
    active_joints,
    joint_by_index,
)

SCHEMA_VERSION = 1

HAND_SIDES = ("left", "right")


@dataclass(frozen=True)
class HandImageRecord:
    """One hand photograph with its landmarks and per-joint labels."""

    image_path: Path
    patient_id: str
    hand_side: str
    capture_week: int
    landmarks: dict[int, tuple[int, int]]
    labels: dict[int, int] = field(default_factory=dict)
    mask_path: Path | None = None

    def label_for(self, joint: JointId) -> int | None:
        return self.labels.get(joint.index)


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered collection of records plus the active-joint policy."""

    records: tuple[HandImageRecord, ...]
    joint_exclusions: frozenset[JointLevel] = DEFAULT_EXCLUSIONS
    schema_version: int = SCHEMA_VERSION

    @property
    def active_joints(self) -> tuple[JointId, ...]:
        return active_joints(self.joint_exclusions)

    @property
    def patient_ids(self) -> tuple[str, ...]:
        """Distinct patient ids in first-appearance order."""
        seen: dict[str, None] = {}
        for rec in self.records:
            seen.setdefault(rec.patient_id, None)
        return tuple(seen)

    def records_for_patients(self, patients: Iterable[str]) -> tuple[HandImageRecord, ...]:
        wanted = set(patients)
        return tuple(r for r in self.records if r.patient_id in wanted)


def validate_record(rec: HandImageRecord, locus: str = "record", check_files: bool = True) -> None:
    """Check a single record's invariants; raise ValidationError on the first breach."""
    if not rec.patient_id:
        raise ValidationError(f"{locus}: patient_id is empty")
    if rec.hand_side not in HAND_SIDES:
        raise ValidationError(f"{locus}: hand_side must be one of {HAND_SIDES}, got {rec.hand_side!r}")
    if rec.capture_week < 0:
        raise ValidationError(f"{locus}: capture_week must be >= 0, got {rec.capture_week}")

    for joint in ALL_JOINTS:
        if joint.index not in rec.landmarks:
            raise ValidationError(f"{locus}: missing landmark for joint {joint} (index {joint.index})")
    if len(rec.landmarks) != N_JOINTS:
        extra = sorted(set(rec.landmarks) - {j.index for j in ALL_JOINTS})
        raise ValidationError(f"{locus}: unknown landmark joint indices {extra}")

    for idx, label in rec.labels.items():
        joint_by_index(idx)  # raises ValueError on junk indices
        if label not in (0, 1):
            raise ValidationError(f"{locus}: label for joint index {idx} must be 0 or 1, got {label!r}")

    if check_files:
        if not rec.image_path.is_file():
            raise ValidationError(f"{locus}: image file not found: {rec.image_path}")
        with Image.open(rec.image_path) as im:
            width, height = im.size
        for idx, (x, y) in rec.landmarks.items():
            if not (0 <= x < width and 0 <= y < height):
                raise ValidationError(
                    f"{locus}: landmark for joint {joint_by_index(idx)} at ({x}, {y}) "
                    f"is outside image bounds {width}x{height}"
                )
        if rec.mask_path is not None and not rec.mask_path.is_file():
            raise ValidationError(f"{locus}: mask file not found: {rec.mask_path}")


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> None:
    """Check all manifest invariants."""
    seen_paths: set[Path] = set()
    for i, rec in enumerate(manifest.records):
        locus = f"record {i} ({rec.image_path})"
        validate_record(rec, locus=locus, check_files=check_files)
        if rec.image_path in seen_paths:
            raise ValidationError(f"{locus}: duplicate image path")
        seen_paths.add(rec.image_path)


def _record_from_json(obj: dict, base_dir: Path, locus: str) -> HandImageRecord:
    try:
        landmarks = {int(k): (int(v[0]), int(v[1])) for k, v in obj["landmarks"].items()}
        labels = {int(k): int(v) for k, v in obj.get("labels", {}).items()}
        mask = obj.get("mask_path")
        return HandImageRecord(
            image_path=_resolve(base_dir, obj["image_path"]),
            patient_id=str(obj["patient_id"]),
            hand_side=str(obj["hand_side"]),
            capture_week=int(obj["capture_week"]),
            landmarks=landmarks,
            labels=labels,
            mask_path=_resolve(base_dir, mask) if mask else None,
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SchemaError(f"{locus}: malformed record field: {exc}") from exc


def _resolve(base_dir: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base_dir / path


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Parse and fully validate a manifest file."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"manifest file not found: {path}")
    base_dir = path.parent

    records: list[HandImageRecord] = []
    header: dict | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if header is None:
                if "schema_version" not in obj:
                    raise SchemaError(f"{path}:1: header line must carry schema_version")
                header = obj
                continue
            records.append(_record_from_json(obj, base_dir, locus=f"{path}:{lineno}"))

    if header is None:
        raise SchemaError(f"{path}: empty manifest (no header line)")
    if header["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(
            f"{path}: unsupported schema_version {header['schema_version']} (expected {SCHEMA_VERSION})"
        )
    try:
        exclusions = frozenset(JointLevel(lv) for lv in header.get("joint_exclusions", ["DIP"]))
    except ValueError as exc:
        raise SchemaError(f"{path}: bad joint_exclusions in header: {exc}") from exc

    manifest = DatasetManifest(
        records=tuple(records),
        joint_exclusions=exclusions,
        schema_version=SCHEMA_VERSION,
    )
    validate_manifest(manifest, check_files=check_files)
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest in canonical formatting (paths relative to the file)."""
    path = Path(path)
    base_dir = path.parent
    lines = [
        json.dumps(
            {
                "schema_version": manifest.schema_version,
                "joint_exclusions": sorted(lv.value for lv in manifest.joint_exclusions),
            },
            sort_keys=True,
        )
    ]
    for rec in manifest.records:
        obj: dict = {
            "image_path": _relativize(rec.image_path, base_dir),
            "patient_id": rec.patient_id,
            "hand_side": rec.hand_side,
            "capture_week": rec.capture_week,
            "landmarks": {str(k): list(rec.landmarks[k]) for k in sorted(rec.landmarks)},
            "labels": {str(k): rec.labels[k] for k in sorted(rec.labels)},
        }
        if rec.mask_path is not None:
            obj["mask_path"] = _relativize(rec.mask_path, base_dir)
        lines.append(json.dumps(obj, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _relativize(p: Path, base_dir: Path) -> str:
    try:
        return p.relative_to(base_dir).as_posix()
    except ValueError:
        return str(p)
