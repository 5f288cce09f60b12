"""Canonical 14-joint hand skeleton and its fixed index ordering.

The skeleton has one MCP joint per finger (5), one PIP-level joint per
finger (5, the thumb's interphalangeal joint is classified as PIP), and
one DIP joint for each finger except the thumb (4).

Index ordering is level-major, thumb-to-little within a level:

    0..4   MCP  (thumb, index, middle, ring, little)
    5..9   PIP  (thumb IP, index, middle, ring, little)
    10..13 DIP  (index, middle, ring, little)

With the default DIP exclusion, the active joints are exactly indices
0 through 9.
"""

from __future__ import annotations

import enum

from .errors import ValidationError
from dataclasses import dataclass


class Finger(enum.Enum):
    THUMB = "thumb"
    INDEX = "index"
    MIDDLE = "middle"
    RING = "ring"
    LITTLE = "little"


class JointLevel(enum.Enum):
    MCP = "MCP"
    PIP = "PIP"
    DIP = "DIP"


FINGERS = tuple(Finger)
LEVELS = tuple(JointLevel)


@dataclass(frozen=True, order=True)
class JointId:
    """One of the 14 hand joints, identified by finger and level."""

    index: int
    finger: Finger
    level: JointLevel

    def __str__(self) -> str:
        return f"{self.finger.value}-{self.level.value}"


def _build_joints() -> tuple[JointId, ...]:
    joints = []
    idx = 0
    for level in (JointLevel.MCP, JointLevel.PIP):
        for finger in FINGERS:
            joints.append(JointId(idx, finger, level))
            idx += 1
    for finger in FINGERS:
        if finger is Finger.THUMB:
            continue  # the thumb has no DIP joint
        joints.append(JointId(idx, finger, JointLevel.DIP))
        idx += 1
    return tuple(joints)


ALL_JOINTS: tuple[JointId, ...] = _build_joints()
N_JOINTS = len(ALL_JOINTS)

_BY_INDEX = {j.index: j for j in ALL_JOINTS}


def joint_by_index(index: int) -> JointId:
    try:
        return _BY_INDEX[index]
    except KeyError:
        raise ValidationError(f"joint index must be in [0, {N_JOINTS - 1}], got {index}") from None


def active_joints(excluded_levels: frozenset[JointLevel] | set[JointLevel]) -> tuple[JointId, ...]:
    """Joints remaining after excluding the given levels, in canonical order."""
    return tuple(j for j in ALL_JOINTS if j.level not in excluded_levels)


DEFAULT_EXCLUSIONS = frozenset({JointLevel.DIP})
