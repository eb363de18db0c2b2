"""Scaling benchmark: per-arrival cost of full joint inference over N frames
versus single-query tracking against an N-keyframe cache.

``ms_per_frame`` is the wall time to process one newly arrived frame. For
``full_joint`` that is the entire N-frame bidirectional pass (what a
non-caching system pays per arrival), for ``cached_track`` it is one query
against a prebuilt cache (cache construction is excluded from the timed
region). Wall times are medians over several repetitions after warmups;
the hardware-independent check is the exact operation accounting below.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

from .aggregator import Aggregator, AggregatorConfig, BIDIRECTIONAL, OpCounter
from .cache import build_cache
from .sequence import OrbitParams, synth_orbit
from .tracker import DecoderHeads, POSE_ONLY, track_frame

__all__ = [
    "BenchRow",
    "bench_scaling",
    "cached_score_elements",
    "cached_score_macs",
    "fit_complexity",
    "joint_score_elements",
    "joint_score_macs",
    "measure_score_ops",
    "write_bench_csv",
]


# closed forms for one global-attention layer, tokens = patch + register per frame
def joint_score_elements(n_frames: int, tokens_per_frame: int) -> int:
    return (n_frames * tokens_per_frame) ** 2


def cached_score_elements(n_keyframes: int, tokens_per_frame: int) -> int:
    return tokens_per_frame * tokens_per_frame * (n_keyframes + 1)


def joint_score_macs(n_frames: int, tokens_per_frame: int, d_k: int) -> int:
    return joint_score_elements(n_frames, tokens_per_frame) * d_k


def cached_score_macs(n_keyframes: int, tokens_per_frame: int, d_k: int) -> int:
    return cached_score_elements(n_keyframes, tokens_per_frame) * d_k


@dataclass(frozen=True)
class BenchRow:
    n_keyframes: int
    mode: str  # "full_joint" | "cached_track"
    ms_per_frame: float

    def __post_init__(self):
        if self.ms_per_frame <= 0:
            raise ValueError("ms_per_frame must be positive")

    @property
    def fps(self) -> float:
        return 1000.0 / self.ms_per_frame


def _median_ms(fn, repeats: int, warmups: int) -> float:
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(samples)


def _orbit_images(count: int, image_size) -> list:
    params = OrbitParams(num_frames=count, image_size=image_size)
    frames, _ = synth_orbit(params)
    return [f.image for f in frames]


def bench_scaling(n_values, *, image_size=(112, 112), num_layers: int = 2,
                  d_k: int = 32, num_register_tokens: int = 4, seed: int = 0,
                  repeats: int = 5, warmups: int = 2) -> list[BenchRow]:
    """Time both modes for every n. Synthetic orbit frames, pose head only."""
    n_values = sorted(set(int(n) for n in n_values))
    if not n_values or n_values[0] < 1:
        raise ValueError(f"n_values must be positive, got {n_values}")
    config = AggregatorConfig(
        num_layers=num_layers, d_k=d_k, num_register_tokens=num_register_tokens,
        seed=seed,
    )
    aggregator = Aggregator(config)
    heads = DecoderHeads(config)
    images = _orbit_images(max(n_values) + 1, image_size)

    rows: list[BenchRow] = []
    for n in n_values:
        batch = images[:n]
        query = images[n]

        def full_pass():
            tokens = [aggregator.encode_frame(img, i) for i, img in enumerate(batch)]
            outs, _ = aggregator.aggregate_forward(tokens, BIDIRECTIONAL)
            heads.decode(outs[-1], POSE_ONLY)

        rows.append(BenchRow(n, "full_joint", _median_ms(full_pass, repeats, warmups)))

        kf_tokens = [aggregator.encode_frame(img, i) for i, img in enumerate(batch)]
        cache, _ = build_cache(kf_tokens, aggregator)

        def cached_pass():
            track_frame(query, cache, aggregator, heads, POSE_ONLY, frame_id=n)

        rows.append(BenchRow(n, "cached_track", _median_ms(cached_pass, repeats, warmups)))
    return rows


def fit_complexity(rows) -> dict[str, float]:
    """Least-squares slope of log(ms) versus log(n), per mode."""
    import numpy as np

    by_mode: dict[str, list[BenchRow]] = {}
    for row in rows:
        by_mode.setdefault(row.mode, []).append(row)
    slopes = {}
    for mode, mode_rows in by_mode.items():
        ns = sorted(set(r.n_keyframes for r in mode_rows))
        if len(ns) < 4:
            raise ValueError(
                f"need at least 4 distinct n values for {mode}, got {len(ns)}"
            )
        x = np.log([r.n_keyframes for r in mode_rows])
        y = np.log([r.ms_per_frame for r in mode_rows])
        slopes[mode] = float(np.polyfit(x, y, 1)[0])
    return slopes


def measure_score_ops(n_frames: int, *, tokens_side: int = 4, num_layers: int = 2,
                      d_k: int = 8, num_register_tokens: int = 4, seed: int = 0) -> dict:
    """Run both modes with an instrumented counter and report the measured
    per-global-layer score sizes next to their closed forms."""
    config = AggregatorConfig(
        num_layers=num_layers, d_k=d_k, num_register_tokens=num_register_tokens,
        seed=seed,
    )
    aggregator = Aggregator(config)
    patch = config.patch_size
    side = tokens_side * patch
    images = _orbit_images(n_frames + 1, (side, side))
    tokens = [aggregator.encode_frame(img, i) for i, img in enumerate(images)]
    tokens_per_frame = tokens[0].total

    counter = OpCounter()
    aggregator.op_counter = counter
    aggregator.aggregate_forward(tokens[:n_frames], BIDIRECTIONAL)
    joint_layers = dict(counter.per_layer_macs)
    joint_elements = dict(counter.per_layer_elements)

    counter.reset()
    cache, _ = build_cache(tokens[:n_frames], aggregator)
    counter.reset()  # the rebuild above is mapping work, not tracking
    from .cache import attend_with_cache

    attend_with_cache(tokens[n_frames], cache, aggregator)
    cached_layers = dict(counter.per_layer_macs)
    cached_elements = dict(counter.per_layer_elements)
    aggregator.op_counter = None

    return {
        "tokens_per_frame": tokens_per_frame,
        "d_k": d_k,
        "joint_macs_per_layer": joint_layers,
        "joint_elements_per_layer": joint_elements,
        "joint_macs_expected": joint_score_macs(n_frames, tokens_per_frame, d_k),
        "joint_elements_expected": joint_score_elements(n_frames, tokens_per_frame),
        "cached_macs_per_layer": cached_layers,
        "cached_elements_per_layer": cached_elements,
        "cached_macs_expected": cached_score_macs(n_frames, tokens_per_frame, d_k),
        "cached_elements_expected": cached_score_elements(n_frames, tokens_per_frame),
    }


def write_bench_csv(path, rows, repeats: int, warmups: int) -> None:
    with open(path, "w") as fh:
        fh.write(f"# median of {repeats} repetitions after {warmups} warmups\n")
        fh.write("# full_joint times one whole N-frame bidirectional pass per arrival;\n")
        fh.write("# cached_track times one query against a prebuilt N-keyframe cache\n")
        fh.write("n_keyframes,mode,ms_per_frame,fps\n")
        for row in rows:
            fh.write(f"{row.n_keyframes},{row.mode},{row.ms_per_frame:.6f},{row.fps:.6f}\n")
