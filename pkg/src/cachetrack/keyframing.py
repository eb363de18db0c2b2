"""Keyframe selection, confidence-based rejection and buffer bookkeeping.

Two policies: fixed-interval insertion every ``stride`` frames (scene
streams), and angular-threshold insertion when the camera's azimuth or
elevation about a pivot differs from every existing keyframe by more than
tau (object streams). Azimuth differences wrap through +-pi via the
shortest angular distance, and a candidate is compared against all
existing keyframes, never just the latest, so revisited viewpoints do not
spawn redundant keyframes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .aggregator import TokenMatrix
from .geometry import Pose

__all__ = [
    "AngularThreshold",
    "FixedInterval",
    "InsertionRecord",
    "Keyframe",
    "KeyframeManager",
    "RejectionPolicy",
    "ViewAngles",
    "angular_distance",
    "maybe_reject",
    "should_insert",
    "view_angles",
    "wrap_angle",
]


@dataclass(frozen=True)
class ViewAngles:
    azimuth: float  # radians in (-pi, pi]
    elevation: float  # radians in [-pi/2, pi/2]


@dataclass(frozen=True)
class FixedInterval:
    stride: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class AngularThreshold:
    tau: float  # radians

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


KeyframePolicy = FixedInterval | AngularThreshold


@dataclass
class Keyframe:
    """Member of the mapping buffer.

    ``pose`` is the tracker's estimate at insertion time; the mapped_*
    fields are refreshed by every cache rebuild it participates in.
    """

    frame_id: int
    image: np.ndarray | None
    tokens: TokenMatrix
    pose: Pose
    angles: ViewAngles
    mean_confidence: float
    mapped_pose: Pose | None = None
    pointmap: np.ndarray | None = None
    confidence_map: np.ndarray | None = None


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = (a + math.pi) % (2.0 * math.pi) - math.pi
    if r <= -math.pi:
        r = math.pi
    return r


def angular_distance(a: float, b: float) -> float:
    """Shortest distance between two angles on the circle."""
    return abs(wrap_angle(a - b))


def view_angles(pose: Pose, pivot) -> ViewAngles:
    """Spherical angles of the camera center relative to a pivot point:
    azimuth in the pivot's horizontal plane, elevation from it."""
    offset = pose.translation - np.asarray(pivot, dtype=np.float64).reshape(3)
    dist = float(np.linalg.norm(offset))
    if dist < 1e-12:
        raise ValueError("degenerate viewpoint: camera center coincides with the pivot")
    azimuth = math.atan2(offset[1], offset[0])
    elevation = math.asin(min(1.0, max(-1.0, offset[2] / dist)))
    return ViewAngles(azimuth, elevation)


def should_insert(angles: ViewAngles, keyframes, tau: float) -> bool:
    """True iff the minimum azimuth or elevation difference to every
    existing keyframe exceeds tau. An empty buffer always inserts."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    keyframes = list(keyframes)
    if not keyframes:
        return True
    min_az = min(angular_distance(angles.azimuth, kf.angles.azimuth) for kf in keyframes)
    min_el = min(abs(angles.elevation - kf.angles.elevation) for kf in keyframes)
    return min_az > tau or min_el > tau


@dataclass(frozen=True)
class RejectionPolicy:
    """Relative confidence floor: the given percentile of the existing
    keyframes' mean confidences, never below ``absolute_floor``. While the
    buffer is smaller than ``bootstrap_count`` every candidate is accepted."""

    percentile: float = 10.0
    absolute_floor: float = 0.05
    bootstrap_count: int = 3


def maybe_reject(candidate: Keyframe, existing, policy: RejectionPolicy = RejectionPolicy()) -> bool:
    """True if the candidate keyframe should be rejected (and the cache
    rolled back)."""
    existing = list(existing)
    if len(existing) < policy.bootstrap_count:
        return False
    confidences = [kf.mean_confidence for kf in existing]
    floor = max(float(np.percentile(confidences, policy.percentile)), policy.absolute_floor)
    return candidate.mean_confidence < floor


@dataclass(frozen=True)
class InsertionRecord:
    """One audit-log row per policy decision."""

    frame_id: int
    decision: str  # bootstrap | insert | reject | skip | degenerate
    azimuth: float
    elevation: float
    confidence: float
    generation: int
    cache_hash: str = ""  # in-memory audit only, not part of the CSV schema


class KeyframeManager:
    """Keyframe buffer plus policy decisions and the auditable insertion log.

    Only the mapping side mutates the buffer; trackers read snapshots of
    its metadata.
    """

    def __init__(self, policy: KeyframePolicy, rejection: RejectionPolicy | None = RejectionPolicy()):
        self.policy = policy
        self.rejection = rejection
        self.keyframes: list[Keyframe] = []
        self.log: list[InsertionRecord] = []

    def decide(self, ordinal: int, angles: ViewAngles | None) -> bool:
        """Should the frame at stream position ``ordinal`` become a keyframe?"""
        if isinstance(self.policy, FixedInterval):
            return ordinal % self.policy.stride == 0
        if angles is None:
            return False
        return should_insert(angles, self.keyframes, self.policy.tau)

    def wants_rejection(self, candidate: Keyframe) -> bool:
        if self.rejection is None:
            return False
        existing = [kf for kf in self.keyframes if kf is not candidate]
        return maybe_reject(candidate, existing, self.rejection)

    def record(self, record: InsertionRecord) -> None:
        self.log.append(record)
