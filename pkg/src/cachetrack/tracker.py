"""Interleaved mapping and tracking.

Mapping owns the keyframe buffer and cache publication: every insertion
rebuilds the cache from scratch with full bidirectional attention and
re-decodes all keyframes, and a low-confidence candidate rolls the
publication back. Tracking is read-only: it encodes one frame, attends to
the latest published cache and decodes the heads, recording which
generation it consumed.

``run_stream`` defaults to deterministic replay (one logical worker, a
fixed interleaving: track the frame against the latest cache, then apply
the keyframe policy). ``live=True`` moves mapping onto a worker thread;
tracking then never blocks on a rebuild and keeps consuming the last
published generation.
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass

import numpy as np

from .aggregator import Aggregator, AggregatorConfig, TokenMatrix, seeded_uniform
from .cache import CachePublisher, KvCache, attend_with_cache, build_cache
from .geometry import Pose, Trajectory
from .keyframing import (
    AngularThreshold,
    FixedInterval,
    InsertionRecord,
    Keyframe,
    KeyframeManager,
    KeyframePolicy,
    RejectionPolicy,
    ViewAngles,
    should_insert,
    view_angles,
)
from .sequence import apply_mask

__all__ = [
    "DecodedFrame",
    "DecoderHeads",
    "HeadConfig",
    "StreamResult",
    "TrackResult",
    "fuse_pointmaps",
    "map_keyframes",
    "nearest_rotation",
    "run_stream",
    "track_frame",
]


@dataclass(frozen=True)
class HeadConfig:
    """Which decoding heads to run. Toggling the point/confidence heads
    changes runtime only; the pose output is computed independently."""

    decode_pose: bool = True
    decode_points: bool = True
    decode_confidence: bool = True

    def __post_init__(self):
        if not self.decode_pose:
            raise ValueError("the pose head cannot be disabled")


POSE_ONLY = HeadConfig(decode_points=False, decode_confidence=False)


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest proper rotation to an arbitrary 3x3 matrix (SVD projection)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class DecodedFrame:
    pose: Pose
    pointmap: np.ndarray | None = None
    confidence: np.ndarray | None = None

    @property
    def mean_confidence(self) -> float | None:
        if self.confidence is None:
            return None
        return float(self.confidence.mean())


class DecoderHeads:
    """Seeded linear decoding heads.

    Pose: the mean register token maps to a 9+3 vector; the 9 entries are
    projected to the nearest proper rotation, the rest is the translation.
    Points: one local 3D point per patch token, broadcast over its pixel
    block. Confidence: a sigmoid scalar per patch token, broadcast the same
    way. Each frame decodes independently of every other frame.
    """

    def __init__(self, config: AggregatorConfig):
        d = config.d_k
        limit = 1.0 / math.sqrt(d)
        self.pose_map = seeded_uniform(config.seed, 0, "pose_head", (d, 12), limit)
        self.point_map = seeded_uniform(config.seed, 0, "point_head", (d, 3), limit)
        self.conf_map = seeded_uniform(config.seed, 0, "conf_head", (d, 1), limit)
        self.patch_size = config.patch_size

    def decode(self, tokens: TokenMatrix, heads: HeadConfig = HeadConfig()) -> DecodedFrame:
        registers = tokens.tokens[tokens.num_patch :].astype(np.float64)
        vec = registers.mean(axis=0) @ self.pose_map.astype(np.float64)
        pose = Pose(nearest_rotation(vec[:9].reshape(3, 3)), vec[9:])

        pointmap = confidence = None
        if heads.decode_points or heads.decode_confidence:
            if tokens.grid is None:
                raise ValueError("token grid unknown; cannot decode per-pixel heads")
            gh, gw = tokens.grid
            p = self.patch_size
            patch = tokens.tokens[: tokens.num_patch].astype(np.float64)
            if heads.decode_points:
                pts = patch @ self.point_map.astype(np.float64)
                pointmap = (
                    pts.reshape(gh, gw, 3).repeat(p, axis=0).repeat(p, axis=1)
                ).astype(np.float32)
            if heads.decode_confidence:
                logit = (patch @ self.conf_map.astype(np.float64))[:, 0]
                conf = 1.0 / (1.0 + np.exp(-logit))
                confidence = (
                    conf.reshape(gh, gw).repeat(p, axis=0).repeat(p, axis=1)
                ).astype(np.float32)
        return DecodedFrame(pose, pointmap, confidence)


@dataclass(frozen=True)
class TrackResult:
    frame_id: int
    timestamp: float
    pose: Pose
    pointmap: np.ndarray | None
    confidence: np.ndarray | None
    generation: int


def map_keyframes(buffer, aggregator: Aggregator, heads: DecoderHeads,
                  publisher: CachePublisher | None = None):
    """Rebuild the cache from the whole buffer and re-decode every keyframe
    (all heads), storing poses/geometry back on the records."""
    buffer = list(buffer)
    if not buffer:
        raise ValueError("empty keyframe buffer")
    cache, finals = build_cache([kf.tokens for kf in buffer], aggregator, publisher)
    decoded = []
    for kf, final in zip(buffer, finals):
        dec = heads.decode(final, HeadConfig())
        kf.mapped_pose = dec.pose
        kf.pointmap = dec.pointmap
        kf.confidence_map = dec.confidence
        kf.mean_confidence = dec.mean_confidence
        decoded.append(dec)
    return cache, decoded


def _track_tokens(tokens: TokenMatrix, cache: KvCache, aggregator: Aggregator,
                  heads: DecoderHeads, head_config: HeadConfig,
                  timestamp: float) -> TrackResult:
    final = attend_with_cache(tokens, cache, aggregator)
    dec = heads.decode(final, head_config)
    return TrackResult(
        tokens.frame_id, timestamp, dec.pose, dec.pointmap, dec.confidence,
        cache.generation,
    )


def track_frame(image, cache: KvCache | None, aggregator: Aggregator, heads: DecoderHeads,
                head_config: HeadConfig = HeadConfig(), mask=None,
                frame_id: int = 0, timestamp: float = 0.0) -> TrackResult:
    """Encode one frame and localize it against the published cache without
    ever mutating the cache."""
    if cache is None:
        raise ValueError("map before track: no published cache")
    if mask is not None:
        image = apply_mask(image, mask)
    tokens = aggregator.encode_frame(image, frame_id)
    return _track_tokens(tokens, cache, aggregator, heads, head_config, timestamp)


def fuse_pointmaps(keyframes, confidence_floor: float):
    """World-frame cloud from the keyframes' decoded geometry: keep points
    with confidence >= floor, transform by each keyframe's mapped pose, and
    color from the source pixels."""
    points, colors = [], []
    for kf in keyframes:
        if kf.pointmap is None or kf.confidence_map is None:
            continue
        keep = kf.confidence_map >= confidence_floor
        if not np.any(keep):
            continue
        local = kf.pointmap[keep].astype(np.float64)
        pose = kf.mapped_pose if kf.mapped_pose is not None else kf.pose
        points.append(pose.apply(local))
        if kf.image is not None:
            colors.append(kf.image[keep])
        else:
            colors.append(np.full((len(local), 3), 128, dtype=np.uint8))
    if not points:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
    return np.vstack(points), np.vstack(colors)


@dataclass
class StreamResult:
    records: list[TrackResult]
    keyframes: list[Keyframe]
    insertion_log: list[InsertionRecord]
    final_cache: KvCache | None

    def trajectory(self) -> Trajectory:
        return Trajectory(
            [r.timestamp for r in self.records], [r.pose for r in self.records]
        )


def _pivot(keyframes, policy: KeyframePolicy, fusion_floor: float) -> np.ndarray:
    if isinstance(policy, AngularThreshold):
        points, _ = fuse_pointmaps(keyframes, fusion_floor)
        if len(points):
            return points.mean(axis=0)
    first = keyframes[0]
    base = first.mapped_pose if first.mapped_pose is not None else first.pose
    return base.translation


def run_stream(source, aggregator: Aggregator, heads: DecoderHeads,
               policy: KeyframePolicy, head_config: HeadConfig = HeadConfig(), *,
               rejection: RejectionPolicy | None = RejectionPolicy(),
               fusion_floor: float = 0.5, confidence_fn=None,
               live: bool = False) -> StreamResult:
    """Track every frame of ``source`` while mapping keyframes per policy.

    The first frame always bootstraps the buffer and cache (identity pose
    anchors the gauge). ``confidence_fn(frame_id, value)`` can override the
    decoded mean confidence a keyframe is judged by. Frames whose keyframe
    was rejected still appear in the trajectory, tracked against the
    rolled-back cache's generation line.
    """
    if live:
        return _run_stream_live(
            source, aggregator, heads, policy, head_config,
            rejection=rejection, fusion_floor=fusion_floor, confidence_fn=confidence_fn,
        )
    publisher = CachePublisher()
    manager = KeyframeManager(policy, rejection)
    records: list[TrackResult] = []

    def remap() -> None:
        map_keyframes(manager.keyframes, aggregator, heads, publisher)
        if confidence_fn is not None:
            for kf in manager.keyframes:
                kf.mean_confidence = confidence_fn(kf.frame_id, kf.mean_confidence)

    ordinal = -1
    for frame in source:
        ordinal += 1
        image = apply_mask(frame.image, frame.mask) if frame.mask is not None else frame.image
        tokens = aggregator.encode_frame(image, frame.frame_id)

        if publisher.current is None:
            kf = Keyframe(frame.frame_id, image, tokens, Pose.identity(),
                          ViewAngles(0.0, 0.0), 1.0)
            manager.keyframes.append(kf)
            remap()
            manager.record(InsertionRecord(
                frame.frame_id, "bootstrap", 0.0, 0.0, kf.mean_confidence,
                publisher.generation, publisher.current.content_hash(),
            ))
            records.append(_track_tokens(tokens, publisher.current, aggregator,
                                         heads, head_config, frame.timestamp))
            continue

        result = _track_tokens(tokens, publisher.current, aggregator, heads,
                               head_config, frame.timestamp)
        records.append(result)

        angles: ViewAngles | None = None
        if isinstance(policy, AngularThreshold):
            try:
                angles = view_angles(result.pose, _pivot(manager.keyframes, policy, fusion_floor))
            except ValueError:
                manager.record(InsertionRecord(
                    frame.frame_id, "degenerate", 0.0, 0.0, 0.0,
                    publisher.generation, publisher.current.content_hash(),
                ))
                continue

        if not manager.decide(ordinal, angles):
            continue

        kf = Keyframe(frame.frame_id, image, tokens, result.pose,
                      angles if angles is not None else ViewAngles(0.0, 0.0), 0.0)
        manager.keyframes.append(kf)
        remap()
        if manager.wants_rejection(kf):
            manager.keyframes.pop()
            restored = publisher.rollback()
            manager.record(InsertionRecord(
                frame.frame_id, "reject", kf.angles.azimuth, kf.angles.elevation,
                kf.mean_confidence, restored.generation, restored.content_hash(),
            ))
        else:
            manager.record(InsertionRecord(
                frame.frame_id, "insert", kf.angles.azimuth, kf.angles.elevation,
                kf.mean_confidence, publisher.generation,
                publisher.current.content_hash(),
            ))

    return StreamResult(records, manager.keyframes, manager.log, publisher.current)


def _run_stream_live(source, aggregator, heads, policy, head_config, *,
                     rejection, fusion_floor, confidence_fn) -> StreamResult:
    """Two-worker variant: mapping runs on its own thread and publishes
    atomically; tracking reads whatever generation is current and never
    blocks on a rebuild (except the unavoidable bootstrap)."""
    publisher = CachePublisher()
    manager = KeyframeManager(policy, rejection)
    records: list[TrackResult] = []
    requests: queue.Queue = queue.Queue()
    pending = threading.Event()
    mapped_once = threading.Event()

    def mapping_worker():
        while True:
            item = requests.get()
            if item is None:
                return
            kf, label = item
            manager.keyframes.append(kf)
            map_keyframes(manager.keyframes, aggregator, heads, publisher)
            if confidence_fn is not None:
                for each in manager.keyframes:
                    each.mean_confidence = confidence_fn(each.frame_id, each.mean_confidence)
            if label != "bootstrap" and manager.wants_rejection(kf):
                manager.keyframes.pop()
                restored = publisher.rollback()
                manager.record(InsertionRecord(
                    kf.frame_id, "reject", kf.angles.azimuth, kf.angles.elevation,
                    kf.mean_confidence, restored.generation, restored.content_hash(),
                ))
            else:
                manager.record(InsertionRecord(
                    kf.frame_id, label, kf.angles.azimuth, kf.angles.elevation,
                    kf.mean_confidence, publisher.generation,
                    publisher.current.content_hash(),
                ))
            mapped_once.set()
            pending.clear()

    worker = threading.Thread(target=mapping_worker, daemon=True)
    worker.start()
    try:
        ordinal = -1
        for frame in source:
            ordinal += 1
            image = apply_mask(frame.image, frame.mask) if frame.mask is not None else frame.image
            tokens = aggregator.encode_frame(image, frame.frame_id)

            if publisher.current is None:
                kf = Keyframe(frame.frame_id, image, tokens, Pose.identity(),
                              ViewAngles(0.0, 0.0), 1.0)
                pending.set()
                requests.put((kf, "bootstrap"))
                mapped_once.wait()
                records.append(_track_tokens(tokens, publisher.current, aggregator,
                                             heads, head_config, frame.timestamp))
                continue

            result = _track_tokens(tokens, publisher.current, aggregator, heads,
                                   head_config, frame.timestamp)
            records.append(result)

            if pending.is_set():
                continue  # a rebuild is in flight; decide again on a later frame
            snapshot = list(manager.keyframes)
            angles: ViewAngles | None = None
            if isinstance(policy, AngularThreshold):
                try:
                    angles = view_angles(result.pose, _pivot(snapshot, policy, fusion_floor))
                except ValueError:
                    continue
            want = (
                ordinal % policy.stride == 0
                if isinstance(policy, FixedInterval)
                else should_insert(angles, snapshot, policy.tau)
            )
            if want:
                kf = Keyframe(frame.frame_id, image, tokens, result.pose,
                              angles if angles is not None else ViewAngles(0.0, 0.0), 0.0)
                pending.set()
                requests.put((kf, "insert"))
    finally:
        requests.put(None)
        worker.join()
    return StreamResult(records, manager.keyframes, manager.log, publisher.current)
