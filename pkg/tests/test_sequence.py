import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cachetrack.geometry import ate_rmse
from cachetrack.keyframing import (
    AngularThreshold,
    FixedInterval,
    KeyframeManager,
    ViewAngles,
    view_angles,
    wrap_angle,
)
from cachetrack.sequence import (
    OrbitParams,
    PipelineConfig,
    apply_mask,
    load_image,
    load_sequence,
    orbit_camera_pose,
    parse_config_file,
    parse_heads,
    pipeline_config_from_options,
    read_ppm,
    render_cube_frame,
    synth_orbit,
    write_insertion_log,
    write_ply,
    write_ppm,
)
from cachetrack.aggregator import AggregatorConfig

from test_keyframing import kf_at, schedule_oracle


# ---- masks ---------------------------------------------------------------------


def test_mask_all_ones_is_identity(rng):
    img = rng.integers(0, 256, (8, 6, 3), dtype=np.uint8)
    assert np.array_equal(apply_mask(img, np.ones((8, 6), dtype=np.uint8)), img)


def test_mask_all_zeros_blacks_out(rng):
    img = rng.integers(1, 256, (8, 6, 3), dtype=np.uint8)
    out = apply_mask(img, np.zeros((8, 6), dtype=np.uint8))
    assert not out.any()


def test_mask_checkerboard_matches_pixel_loop(rng):
    img = rng.integers(0, 256, (10, 12, 3), dtype=np.uint8)
    mask = np.indices((10, 12)).sum(axis=0) % 2
    out = apply_mask(img, mask.astype(np.uint8))
    oracle = img.copy()
    for r in range(10):
        for c in range(12):
            if mask[r, c] == 0:
                oracle[r, c] = 0
    assert hashlib.sha256(out.tobytes()).hexdigest() == hashlib.sha256(oracle.tobytes()).hexdigest()


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_mask_idempotent(seed):
    r = np.random.default_rng(seed)
    img = r.integers(0, 256, (6, 7, 3), dtype=np.uint8)
    mask = r.integers(0, 2, (6, 7)).astype(np.uint8)
    once = apply_mask(img, mask)
    assert np.array_equal(apply_mask(once, mask), once)


def test_mask_resolution_mismatch(rng):
    img = rng.integers(0, 256, (8, 6, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="mask shape"):
        apply_mask(img, np.ones((6, 8), dtype=np.uint8))


# ---- raster io ----------------------------------------------------------------------


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (9, 13, 3), dtype=np.uint8)
    path = tmp_path / "frame.ppm"
    write_ppm(path, img)
    assert np.array_equal(read_ppm(path), img)


def test_ppm_ascii_variant(tmp_path):
    path = tmp_path / "tiny.ppm"
    path.write_text("P3\n# comment\n2 1\n255\n255 0 0  0 255 0\n")
    img = read_ppm(path)
    assert img.shape == (1, 2, 3)
    assert list(img[0, 0]) == [255, 0, 0]


def test_png_round_trip(tmp_path, rng):
    from PIL import Image

    img = rng.integers(0, 256, (9, 13, 3), dtype=np.uint8)
    path = tmp_path / "frame.png"
    Image.fromarray(img).save(path)
    assert np.array_equal(load_image(path), img)


# ---- manifests ------------------------------------------------------------------------


def _write_frames(tmp_path, sizes, rng):
    paths = []
    for i, (w, h) in enumerate(sizes):
        p = tmp_path / f"f{i}.ppm"
        write_ppm(p, rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
        paths.append(p.name)
    return paths


def test_manifest_empty(tmp_path):
    m = tmp_path / "seq.txt"
    m.write_text("# nothing here\n")
    with pytest.raises(ValueError, match="no frames"):
        load_sequence(m)


def test_manifest_orders_and_yields(tmp_path, rng):
    names = _write_frames(tmp_path, [(6, 4)] * 3, rng)
    m = tmp_path / "seq.txt"
    m.write_text(f"0.2 {names[1]}\n0.1 {names[0]}\n0.3 {names[2]}\n")
    manifest = load_sequence(m)
    assert len(manifest) == 3
    frames = list(manifest.frames())
    assert [f.timestamp for f in frames] == [0.1, 0.2, 0.3]
    assert [f.frame_id for f in frames] == [0, 1, 2]
    assert frames[0].image.shape == (4, 6, 3)


def test_manifest_missing_file(tmp_path, rng):
    names = _write_frames(tmp_path, [(6, 4)], rng)
    m = tmp_path / "seq.txt"
    m.write_text(f"0.1 {names[0]}\n0.2 nothere.ppm\n")
    with pytest.raises(ValueError, match="nothere.ppm"):
        load_sequence(m)


def test_manifest_resolution_mismatch_fails_at_load(tmp_path, rng):
    names = _write_frames(tmp_path, [(6, 4), (8, 4)], rng)
    m = tmp_path / "seq.txt"
    m.write_text(f"0.1 {names[0]}\n0.2 {names[1]}\n")
    with pytest.raises(ValueError, match="differs from the"):
        load_sequence(m)


def test_manifest_mask_resolution_checked_at_load(tmp_path, rng):
    names = _write_frames(tmp_path, [(6, 4)], rng)
    bad_mask = tmp_path / "mask.ppm"
    write_ppm(bad_mask, np.ones((5, 6, 3), dtype=np.uint8))
    m = tmp_path / "seq.txt"
    m.write_text(f"0.1 {names[0]} mask.ppm\n")
    with pytest.raises(ValueError, match="mask resolution"):
        load_sequence(m)


def test_manifest_gt_directive(tmp_path, rng):
    names = _write_frames(tmp_path, [(6, 4)], rng)
    gt = tmp_path / "gt.txt"
    gt.write_text("0.0 0 0 0 0 0 0 1\n")
    m = tmp_path / "seq.txt"
    m.write_text(f"gt=gt.txt\n0.1 {names[0]}\n")
    manifest = load_sequence(m)
    assert manifest.gt_path == gt


def test_manifest_masks_applied(tmp_path, rng):
    img = rng.integers(1, 256, (4, 6, 3), dtype=np.uint8)
    write_ppm(tmp_path / "f.ppm", img)
    mask = np.zeros((4, 6, 3), dtype=np.uint8)
    mask[:, :3] = 255
    write_ppm(tmp_path / "m.ppm", mask)
    m = tmp_path / "seq.txt"
    m.write_text("0.1 f.ppm m.ppm\n")
    frame = next(load_sequence(m).frames())
    out = apply_mask(frame.image, frame.mask)
    assert not out[:, 3:].any() and out[:, :3].any()


# ---- synthetic orbit -----------------------------------------------------------------------


def test_orbit_closes_after_full_circle():
    params = OrbitParams(step=math.radians(10.0), num_frames=36, elevation=0.2)
    start = orbit_camera_pose(params, 0)
    wrapped = orbit_camera_pose(params, 36)  # one step past the last frame
    assert np.max(np.abs(wrapped.translation - start.translation)) < 1e-9
    assert np.max(np.abs(wrapped.rotation - start.rotation)) < 1e-9


def test_orbit_angles_match_parameters():
    params = OrbitParams(step=math.radians(11.0), num_frames=20, elevation=0.25)
    for i in (0, 3, 7):
        pose = orbit_camera_pose(params, i)
        angles = view_angles(pose, params.pivot)
        assert angles.azimuth == pytest.approx(wrap_angle(i * params.step), abs=1e-12)
        assert angles.elevation == pytest.approx(0.25, abs=1e-12)


def test_orbit_gt_scores_zero_against_itself():
    _, gt = synth_orbit(OrbitParams(num_frames=12, image_size=(28, 28)))
    assert ate_rmse(gt, gt) < 1e-12


def test_orbit_render_deterministic_and_has_cube():
    params = OrbitParams(num_frames=1, image_size=(56, 56))
    pose = orbit_camera_pose(params, 0)
    a = render_cube_frame(params, pose)
    b = render_cube_frame(params, pose)
    assert np.array_equal(a, b)
    assert a.any()  # the cube is visible
    assert not a[0, 0].any()  # background stays black


def test_orbit_keyframing_thresholds_match_schedule_oracle():
    # 11-degree steps: tau=10 keyframes every frame, tau=15 every other frame
    step = 11.0
    params = OrbitParams(step=math.radians(step), num_frames=16, elevation=0.0)
    poses = [orbit_camera_pose(params, i) for i in range(params.num_frames)]
    for tau_deg, expected_stride in ((10.0, 1), (15.0, 2)):
        manager = KeyframeManager(AngularThreshold(math.radians(tau_deg)), rejection=None)
        schedule = []
        for i, pose in enumerate(poses):
            angles = view_angles(pose, params.pivot)
            insert = manager.decide(i, angles)
            schedule.append(insert)
            if insert:
                manager.keyframes.append(kf_at(math.degrees(angles.azimuth), frame_id=i))
        oracle = schedule_oracle([i * step for i in range(16)], [0.0] * 16, tau_deg)
        assert schedule == oracle
        assert [i for i, s in enumerate(schedule) if s] == list(range(0, 16, expected_stride))


def test_orbit_validation():
    with pytest.raises(ValueError, match="radius"):
        OrbitParams(radius=0.0)
    with pytest.raises(ValueError, match="num_frames"):
        OrbitParams(num_frames=0)


# ---- ply / logs ------------------------------------------------------------------------------


def test_write_ply(tmp_path):
    path = tmp_path / "cloud.ply"
    write_ply(path, np.array([[1.0, 2.0, 3.0]]), np.array([[10, 20, 30]], dtype=np.uint8))
    text = path.read_text().splitlines()
    assert text[0] == "ply"
    assert "element vertex 1" in text
    assert text[-1] == "1.000000 2.000000 3.000000 10 20 30"


def test_write_ply_length_mismatch(tmp_path):
    with pytest.raises(ValueError, match="colors"):
        write_ply(tmp_path / "c.ply", np.zeros((2, 3)), np.zeros((1, 3), dtype=np.uint8))


def test_write_insertion_log(tmp_path):
    from cachetrack.keyframing import InsertionRecord

    path = tmp_path / "log.csv"
    write_insertion_log(path, [InsertionRecord(3, "insert", 0.1, 0.2, 0.9, 2, "ab")])
    lines = path.read_text().splitlines()
    assert lines[0] == "frame_id,decision,azimuth,elevation,confidence,generation"
    assert lines[1].startswith("3,insert,0.1")
    assert lines[1].endswith(",2")


# ---- pipeline config ----------------------------------------------------------------------------


def test_config_resolution_presets():
    cfg = PipelineConfig(AggregatorConfig(), FixedInterval(50), resolution="350x266")
    assert cfg.resolution_wh == (350, 266)
    with pytest.raises(ValueError, match="resolution"):
        PipelineConfig(AggregatorConfig(), FixedInterval(50), resolution="100x100")


def test_config_patch_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        PipelineConfig(AggregatorConfig(patch_size=13), FixedInterval(50))


def test_parse_heads():
    assert parse_heads("all") == (True, True)
    assert parse_heads("pose") == (False, False)
    assert parse_heads("pose,points") == (True, False)
    assert parse_heads("pose,confidence") == (False, True)
    with pytest.raises(ValueError, match="pose head"):
        parse_heads("points")
    with pytest.raises(ValueError, match="unknown head"):
        parse_heads("pose,depth")


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# run settings\nseed=7\npolicy=angular\ntau_deg=12.5\nheads=pose\n")
    options = parse_config_file(path)
    cfg = pipeline_config_from_options(options)
    assert cfg.aggregator.seed == 7
    assert isinstance(cfg.policy, AngularThreshold)
    assert cfg.policy.tau == pytest.approx(math.radians(12.5))
    assert cfg.decode_points is False and cfg.decode_confidence is False
    options["seed"] = "9"  # CLI-style override wins
    assert pipeline_config_from_options(options).aggregator.seed == 9


def test_config_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("this is not a setting\n")
    with pytest.raises(ValueError, match="key=value"):
        parse_config_file(path)


def test_config_unknown_policy():
    with pytest.raises(ValueError, match="policy"):
        pipeline_config_from_options({"policy": "learned"})
