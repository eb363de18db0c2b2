"""Command line entry points: map, track, bench, eval."""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .aggregator import Aggregator
from .bench import bench_scaling, fit_complexity, measure_score_ops, write_bench_csv
from .cache import build_cache, load_cache, save_cache
from .geometry import evaluate_trajectories, format_report, read_tum, write_tum
from .sequence import (
    load_sequence,
    parse_config_file,
    pipeline_config_from_options,
    write_insertion_log,
    write_ply,
)
from .tracker import DecoderHeads, HeadConfig, fuse_pointmaps, run_stream, track_frame


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--seed", type=int, help="weight seed")
    parser.add_argument("--resolution", help="input resolution preset, e.g. 224x224")
    parser.add_argument("--layers", type=int, help="aggregator layer count (even)")
    parser.add_argument("--d-k", type=int, dest="d_k", help="token width")
    parser.add_argument("--patch-size", type=int, help="patch edge in pixels")
    parser.add_argument("--registers", type=int, help="register tokens per frame")
    parser.add_argument("--policy", choices=["fixed", "angular"], help="keyframe policy")
    parser.add_argument("--stride", type=int, help="fixed-interval stride in frames")
    parser.add_argument("--tau-deg", type=float, help="angular threshold in degrees")
    parser.add_argument("--heads", help="decoding heads: pose, all, or a comma list")
    parser.add_argument(
        "--confidence-floor", type=float, help="confidence floor for point fusion"
    )


def _options_from_args(args) -> dict[str, str]:
    options = parse_config_file(args.config) if args.config else {}
    for key, attr in [
        ("seed", "seed"), ("resolution", "resolution"), ("layers", "layers"),
        ("d_k", "d_k"), ("patch_size", "patch_size"), ("registers", "registers"),
        ("policy", "policy"), ("stride", "stride"), ("tau_deg", "tau_deg"),
        ("heads", "heads"), ("confidence_floor", "confidence_floor"),
    ]:
        value = getattr(args, attr, None)
        if value is not None:
            options[key] = str(value)
    if getattr(args, "live", False):
        options["replay"] = "0"
    if getattr(args, "replay", False):
        options["replay"] = "1"
    return options


def _check_resolution(manifest, config) -> None:
    if manifest.resolution != config.resolution_wh:
        w, h = manifest.resolution
        raise ValueError(
            f"sequence resolution {w}x{h} does not match the configured "
            f"preset {config.resolution}"
        )


def _cmd_map(args) -> int:
    config = pipeline_config_from_options(_options_from_args(args))
    manifest = load_sequence(args.manifest)
    _check_resolution(manifest, config)
    aggregator = Aggregator(config.aggregator)
    tokens = []
    for frame in manifest.frames():
        image = frame.image
        if frame.mask is not None:
            from .sequence import apply_mask

            image = apply_mask(image, frame.mask)
        tokens.append(aggregator.encode_frame(image, frame.frame_id))
    cache, _ = build_cache(tokens, aggregator)
    save_cache(cache, args.out)
    print(f"keyframes={cache.num_keyframes}")
    print(f"footprint_bytes={cache.memory_footprint()}")
    print(f"content_hash={cache.content_hash()}")
    print(f"cache={args.out}")
    return 0


def _cmd_track(args) -> int:
    config = pipeline_config_from_options(_options_from_args(args))
    manifest = load_sequence(args.manifest)
    _check_resolution(manifest, config)
    aggregator = Aggregator(config.aggregator)
    heads = DecoderHeads(config.aggregator)
    head_config = HeadConfig(
        decode_points=config.decode_points, decode_confidence=config.decode_confidence
    )

    if args.cache:
        cache = load_cache(args.cache)
        records = [
            track_frame(
                frame.image, cache, aggregator, heads, head_config,
                mask=frame.mask, frame_id=frame.frame_id, timestamp=frame.timestamp,
            )
            for frame in manifest.frames()
        ]
        from .geometry import Trajectory

        trajectory = Trajectory([r.timestamp for r in records], [r.pose for r in records])
        write_tum(args.trajectory, trajectory)
        print(f"frames={len(records)} generation={cache.generation}")
        print(f"trajectory={args.trajectory}")
        return 0

    result = run_stream(
        manifest.frames(), aggregator, heads, config.policy, head_config,
        fusion_floor=config.confidence_floor, live=not config.replay,
    )
    write_tum(args.trajectory, result.trajectory())
    print(f"frames={len(result.records)} keyframes={len(result.keyframes)}")
    print(f"trajectory={args.trajectory}")
    if args.ply:
        points, colors = fuse_pointmaps(result.keyframes, config.confidence_floor)
        write_ply(args.ply, points, colors)
        print(f"ply={args.ply} points={len(points)}")
    if args.log:
        write_insertion_log(args.log, result.insertion_log)
        print(f"log={args.log}")
    return 0


def _cmd_bench(args) -> int:
    n_values = [int(n) for n in args.n.split(",") if n.strip()]
    try:
        width, height = map(int, args.size.lower().split("x"))
    except ValueError:
        raise ValueError(f"--size must look like 112x112, got {args.size!r}") from None
    rows = bench_scaling(
        n_values,
        image_size=(width, height),
        num_layers=args.layers or 2,
        d_k=args.d_k or 32,
        seed=args.seed or 0,
        repeats=args.repeats,
        warmups=args.warmups,
    )
    write_bench_csv(args.out, rows, args.repeats, args.warmups)
    print(f"csv={args.out}")
    for row in rows:
        print(f"n={row.n_keyframes} mode={row.mode} ms={row.ms_per_frame:.3f} fps={row.fps:.2f}")
    if len(set(r.n_keyframes for r in rows)) >= 4:
        for mode, slope in sorted(fit_complexity(rows).items()):
            print(f"slope_{mode}={slope:.3f}")
    ops = measure_score_ops(max(n_values))
    print(f"joint_score_elements={ops['joint_elements_expected']}")
    print(f"cached_score_elements={ops['cached_elements_expected']}")
    return 0


def _cmd_eval(args) -> int:
    est = read_tum(args.estimated)
    gt = read_tum(args.ground_truth)
    metrics = evaluate_trajectories(est, gt, max_diff=args.max_diff)
    sys.stdout.write(format_report(metrics))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(",".join(metrics.keys()) + "\n")
            fh.write(",".join(str(v) for v in metrics.values()) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cachetrack",
        description="Map keyframes once with full attention, cache the "
        "key/value state, then track new frames against it in linear time.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_map = sub.add_parser("map", help="build and serialize a cache from a manifest")
    p_map.add_argument("manifest")
    p_map.add_argument("--out", required=True, help="output cache file")
    _add_model_args(p_map)
    p_map.set_defaults(func=_cmd_map)

    p_track = sub.add_parser("track", help="track a manifest's frames")
    p_track.add_argument("manifest")
    p_track.add_argument("--cache", help="pre-built cache file (pure localization)")
    p_track.add_argument("--trajectory", required=True, help="output TUM trajectory")
    p_track.add_argument("--ply", help="output fused point cloud (PLY)")
    p_track.add_argument("--log", help="output keyframe insertion log (CSV)")
    p_track.add_argument(
        "--replay", action="store_true",
        help="deterministic replay interleaving (the default)",
    )
    p_track.add_argument(
        "--live", action="store_true", help="run mapping on a separate worker thread"
    )
    _add_model_args(p_track)
    p_track.set_defaults(func=_cmd_track)

    p_bench = sub.add_parser("bench", help="run the scaling benchmark")
    p_bench.add_argument("--n", default="8,16,32,64", help="comma-separated cache sizes")
    p_bench.add_argument("--out", required=True, help="output CSV")
    p_bench.add_argument("--repeats", type=int, default=5)
    p_bench.add_argument("--warmups", type=int, default=2)
    p_bench.add_argument("--size", default="112x112", help="benchmark image size WxH")
    p_bench.add_argument("--layers", type=int)
    p_bench.add_argument("--d-k", type=int, dest="d_k")
    p_bench.add_argument("--seed", type=int)
    p_bench.set_defaults(func=_cmd_bench)

    p_eval = sub.add_parser("eval", help="compare two TUM trajectories")
    p_eval.add_argument("estimated")
    p_eval.add_argument("ground_truth")
    p_eval.add_argument("--max-diff", type=float, default=0.02,
                        help="timestamp association window in seconds")
    p_eval.add_argument("--csv", help="also write the metrics as CSV")
    p_eval.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
