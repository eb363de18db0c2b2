"""Sequence ingestion, synthetic orbit generation and file formats.

Manifests are line-oriented text: ``timestamp image_path [mask_path]``,
with ``#`` comments and an optional ``gt=<trajectory path>`` directive.
Images load from PPM (built-in parser, the dependency-free minimum) or
anything Pillow can open; all frames of a sequence must share one
resolution and masks must match it — both are validated up front when the
manifest loads, not mid-run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregator import AggregatorConfig
from .geometry import Pose, Trajectory
from .keyframing import AngularThreshold, FixedInterval, KeyframePolicy

__all__ = [
    "FrameEntry",
    "LoadedFrame",
    "OrbitParams",
    "PipelineConfig",
    "RESOLUTION_PRESETS",
    "SequenceManifest",
    "apply_mask",
    "load_image",
    "load_mask",
    "load_sequence",
    "orbit_camera_pose",
    "parse_config_file",
    "parse_heads",
    "pipeline_config_from_options",
    "read_ppm",
    "render_cube_frame",
    "synth_orbit",
    "write_insertion_log",
    "write_ply",
    "write_ppm",
]

RESOLUTION_PRESETS = {
    "224x224": (224, 224),
    "308x308": (308, 308),
    "350x266": (350, 266),
    "518x518": (518, 518),
}


# ---- raster i/o --------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def _ppm_tokens(raw: bytes):
    """Yield whitespace-separated header tokens, skipping # comments."""
    i = 0
    while i < len(raw):
        c = raw[i : i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace():
                j += 1
            yield raw[i:j], j
            i = j


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = _ppm_tokens(raw)
    try:
        magic, _ = next(tokens)
        (width, _), (height, _), (maxval, end) = (next(tokens) for _ in range(3))
    except StopIteration:
        raise ValueError(f"{path}: truncated PPM header") from None
    if magic not in (b"P6", b"P3"):
        raise ValueError(f"{path}: unsupported PPM magic {magic!r}")
    w, h, mv = int(width), int(height), int(maxval)
    if mv != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {mv}")
    if magic == b"P6":
        data = raw[end + 1 : end + 1 + w * h * 3]
        if len(data) != w * h * 3:
            raise ValueError(f"{path}: truncated PPM pixel data")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()
    values = [int(tok) for tok, _ in _ppm_tokens(raw[end:])]
    if len(values) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} samples, got {len(values)}")
    return np.array(values, dtype=np.uint8).reshape(h, w, 3)


def _ppm_size(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(512)
    tokens = _ppm_tokens(raw)
    next(tokens)
    (width, _), (height, _) = next(tokens), next(tokens)
    return int(width), int(height)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def image_size(path) -> tuple[int, int]:
    """(width, height) without decoding the pixel data."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return _ppm_size(path)
    from PIL import Image

    with Image.open(path) as im:
        return im.size


def load_mask(path) -> np.ndarray:
    mask = load_image(path)
    return (mask.max(axis=2) > 0).astype(np.uint8)


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out pixels where the mask is zero; everything else unchanged."""
    img = np.asarray(image)
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m.max(axis=2)
    if m.shape != img.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {img.shape[:2]}")
    return np.where(m[..., None] > 0, img, 0).astype(img.dtype)


# ---- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class FrameEntry:
    timestamp: float
    path: Path
    mask_path: Path | None = None


@dataclass(frozen=True)
class LoadedFrame:
    frame_id: int
    timestamp: float
    image: np.ndarray
    mask: np.ndarray | None = None


@dataclass
class SequenceManifest:
    entries: list[FrameEntry]
    resolution: tuple[int, int]  # (width, height)
    gt_path: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def frames(self):
        """Decode frames lazily, in timestamp order."""
        for i, entry in enumerate(self.entries):
            image = load_image(entry.path)
            mask = load_mask(entry.mask_path) if entry.mask_path else None
            yield LoadedFrame(i, entry.timestamp, image, mask)


def load_sequence(manifest_path) -> SequenceManifest:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries: list[FrameEntry] = []
    gt_path: Path | None = None
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("gt="):
                gt_path = root / line[3:].strip()
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ValueError(
                    f"{manifest_path}:{lineno}: expected 'timestamp path [mask_path]', "
                    f"got {len(parts)} fields"
                )
            mask = root / parts[2] if len(parts) == 3 else None
            entries.append(FrameEntry(float(parts[0]), root / parts[1], mask))
    if not entries:
        raise ValueError(f"{manifest_path}: manifest contains no frames")
    entries.sort(key=lambda e: e.timestamp)

    resolution: tuple[int, int] | None = None
    for entry in entries:
        if not entry.path.is_file():
            raise ValueError(f"missing image file: {entry.path}")
        size = image_size(entry.path)
        if resolution is None:
            resolution = size
        elif size != resolution:
            raise ValueError(
                f"{entry.path}: resolution {size[0]}x{size[1]} differs from the "
                f"sequence's {resolution[0]}x{resolution[1]}"
            )
        if entry.mask_path is not None:
            if not entry.mask_path.is_file():
                raise ValueError(f"missing mask file: {entry.mask_path}")
            msize = image_size(entry.mask_path)
            if msize != resolution:
                raise ValueError(
                    f"{entry.mask_path}: mask resolution {msize[0]}x{msize[1]} does "
                    f"not match the sequence's {resolution[0]}x{resolution[1]}"
                )
    if gt_path is not None and not gt_path.is_file():
        raise ValueError(f"missing ground-truth trajectory: {gt_path}")
    return SequenceManifest(entries, resolution, gt_path)


# ---- synthetic orbit -----------------------------------------------------------

_FACE_COLORS = np.array(
    [
        [220, 60, 60],  # -x
        [60, 200, 60],  # +x
        [60, 90, 220],  # -y
        [230, 200, 50],  # +y
        [200, 70, 200],  # -z
        [70, 210, 210],  # +z
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class OrbitParams:
    radius: float = 2.5
    step: float = math.radians(10.0)  # azimuth advance per frame
    num_frames: int = 36
    pivot: tuple[float, float, float] = (0.0, 0.0, 0.0)
    elevation: float | tuple = 0.3  # constant, or one value per frame
    image_size: tuple[int, int] = (112, 112)  # (width, height)
    cube_half: float = 0.5
    fps: float = 30.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.num_frames < 1:
            raise ValueError(f"num_frames must be >= 1, got {self.num_frames}")

    def elevation_at(self, index: int) -> float:
        if isinstance(self.elevation, (int, float)):
            return float(self.elevation)
        return float(self.elevation[index])


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation: z forward (toward target), y down."""
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(float(z @ up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def orbit_camera_pose(params: OrbitParams, index: int) -> Pose:
    azimuth = index * params.step
    elev = params.elevation_at(min(index, params.num_frames - 1))
    pivot = np.asarray(params.pivot, dtype=np.float64)
    center = pivot + params.radius * np.array(
        [
            math.cos(azimuth) * math.cos(elev),
            math.sin(azimuth) * math.cos(elev),
            math.sin(elev),
        ]
    )
    return Pose(_look_at(center, pivot), center)


def render_cube_frame(params: OrbitParams, pose: Pose) -> np.ndarray:
    """Flat-shaded axis-aligned cube at the pivot, rasterized by ray-box
    intersection. Deterministic in the pose and parameters."""
    w, h = params.image_size
    focal = float(h)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([(us - cx) / focal, (vs - cy) / focal, np.ones_like(us)], axis=-1)
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation
    pivot = np.asarray(params.pivot, dtype=np.float64)
    lo = pivot - params.cube_half
    hi = pivot + params.cube_half

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (lo - origin) * inv
        t_hi = (hi - origin) * inv
    t_near_ax = np.fmin(t_lo, t_hi)
    t_far_ax = np.fmax(t_lo, t_hi)
    t_near = np.max(t_near_ax, axis=-1)
    t_far = np.min(t_far_ax, axis=-1)
    hit = (t_far >= t_near) & (t_near > 0)

    entry_axis = np.argmax(t_near_ax, axis=-1)
    entry_sign = np.take_along_axis(dirs, entry_axis[..., None], axis=-1)[..., 0] > 0
    face = entry_axis * 2 + entry_sign.astype(np.int64)

    image = np.zeros((h, w, 3), dtype=np.uint8)
    image[hit] = _FACE_COLORS[face[hit]]
    return image


def synth_orbit(params: OrbitParams):
    """Procedural frames plus their exact camera trajectory."""
    frames: list[LoadedFrame] = []
    timestamps: list[float] = []
    poses: list[Pose] = []
    for i in range(params.num_frames):
        pose = orbit_camera_pose(params, i)
        frames.append(LoadedFrame(i, i / params.fps, render_cube_frame(params, pose), None))
        timestamps.append(i / params.fps)
        poses.append(pose)
    return frames, Trajectory(timestamps, poses)


# ---- point cloud and log output -------------------------------------------------


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if len(points) != len(colors):
        raise ValueError(f"{len(points)} points but {len(colors)} colors")
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for (x, y, z), (r, g, b) in zip(points, colors):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")


def write_insertion_log(path, records) -> None:
    with open(path, "w") as fh:
        fh.write("frame_id,decision,azimuth,elevation,confidence,generation\n")
        for r in records:
            fh.write(
                f"{r.frame_id},{r.decision},{r.azimuth:.9f},{r.elevation:.9f},"
                f"{r.confidence:.9f},{r.generation}\n"
            )


# ---- pipeline configuration -------------------------------------------------------


@dataclass
class PipelineConfig:
    aggregator: AggregatorConfig
    policy: KeyframePolicy
    decode_points: bool = True
    decode_confidence: bool = True
    resolution: str = "224x224"
    confidence_floor: float = 0.5
    replay: bool = True

    def __post_init__(self):
        if self.resolution not in RESOLUTION_PRESETS:
            raise ValueError(
                f"resolution {self.resolution!r} is not one of "
                f"{sorted(RESOLUTION_PRESETS)}"
            )
        w, h = RESOLUTION_PRESETS[self.resolution]
        p = self.aggregator.patch_size
        if w % p != 0 or h % p != 0:
            raise ValueError(
                f"resolution {self.resolution} is not divisible by patch size {p}"
            )

    @property
    def resolution_wh(self) -> tuple[int, int]:
        return RESOLUTION_PRESETS[self.resolution]


def parse_heads(spec: str):
    """'pose', 'all', or a comma list out of pose/points/confidence."""
    spec = spec.strip().lower()
    if spec == "all":
        return True, True
    parts = {p.strip() for p in spec.split(",") if p.strip()}
    unknown = parts - {"pose", "points", "confidence"}
    if unknown:
        raise ValueError(f"unknown head name(s): {sorted(unknown)}")
    if "pose" not in parts:
        raise ValueError("the pose head cannot be disabled")
    return "points" in parts, "confidence" in parts


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def pipeline_config_from_options(options: dict[str, str]) -> PipelineConfig:
    """Build a PipelineConfig from flat key=value options (config file
    and/or CLI overrides)."""
    get = options.get
    aggregator = AggregatorConfig(
        num_layers=int(get("layers", 4)),
        d_k=int(get("d_k", 32)),
        patch_size=int(get("patch_size", 14)),
        num_register_tokens=int(get("registers", 4)),
        seed=int(get("seed", 0)),
    )
    policy_name = get("policy", "fixed").lower()
    if policy_name == "fixed":
        policy: KeyframePolicy = FixedInterval(int(get("stride", 50)))
    elif policy_name == "angular":
        policy = AngularThreshold(math.radians(float(get("tau_deg", 10.0))))
    else:
        raise ValueError(f"unknown policy {policy_name!r} (expected fixed or angular)")
    decode_points, decode_confidence = parse_heads(get("heads", "all"))
    return PipelineConfig(
        aggregator=aggregator,
        policy=policy,
        decode_points=decode_points,
        decode_confidence=decode_confidence,
        resolution=get("resolution", "224x224"),
        confidence_floor=float(get("confidence_floor", 0.5)),
        replay=get("replay", "1") not in ("0", "false", "no"),
    )
