"""SE(3)/Sim(3) transforms, trajectory alignment and pose-error metrics.

Conventions: poses are camera-to-world, rotations are proper orthonormal
3x3 matrices, trajectories use the TUM text layout
``timestamp tx ty tz qx qy qz qw`` with the quaternion in (x, y, z, w)
order. All geometry here runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DEFAULT_RECALL_THRESHOLDS",
    "Pose",
    "Sim3",
    "Trajectory",
    "associate",
    "ate_rmse",
    "evaluate_trajectories",
    "format_report",
    "pose_recall",
    "quaternion_to_rotation",
    "read_tum",
    "rotation_geodesic_deg",
    "rotation_to_quaternion",
    "se3_compose",
    "se3_invert",
    "sim3_apply",
    "umeyama_sim3",
    "write_tum",
]

# recall tolerances as (cm, degrees) pairs
DEFAULT_RECALL_THRESHOLDS = ((1.0, 1.0), (3.0, 3.0), (5.0, 5.0))


def _check_rotation(r: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got shape {r.shape}")
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        raise ValueError("rotation matrix is not orthonormal")
    if np.linalg.det(r) < 0:
        raise ValueError("rotation matrix is a reflection (det < 0)")
    return r


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def se3_compose(a: Pose, b: Pose) -> Pose:
    """Composite transform a∘b (apply b first, then a)."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_invert(t: Pose) -> Pose:
    return Pose(t.rotation.T, -t.rotation.T @ t.translation)


@dataclass(frozen=True)
class Sim3:
    """Similarity transform: p -> scale * R p + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Sim3":
        return Sim3(1.0, np.eye(3), np.zeros(3))


def sim3_apply(sim: Sim3, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return sim.scale * (pts @ sim.rotation.T) + sim.translation


def umeyama_sim3(est, gt) -> Sim3:
    """Least-squares similarity minimizing sum ||gt_i - (s R est_i + t)||^2.

    Closed form via the centered cross-covariance and its singular value
    decomposition, with the determinant correction that rules out
    reflections.

    Input:
    est -- source points, (n, 3)
    gt  -- target points, (n, 3)

    Output: the Sim3 mapping est onto gt.
    """
    x = np.asarray(est, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"point sets must both be (n, 3), got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise ValueError(f"at least 3 point pairs required, got {n}")
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    xc = x - mx
    yc = y - my
    cov = yc.T @ xc / n
    if np.linalg.matrix_rank(cov) < 2:
        raise ValueError("degenerate point configuration (rank < 2)")
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rotation = u @ s_fix @ vt
    var_x = (xc * xc).sum() / n
    scale = float(np.trace(np.diag(d) @ s_fix) / var_x)
    translation = my - scale * rotation @ mx
    return Sim3(scale, rotation, translation)


def rotation_geodesic_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    rel = np.asarray(r_a, dtype=np.float64) @ np.asarray(r_b, dtype=np.float64).T
    cos = (np.trace(rel) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


# ---- trajectories -----------------------------------------------------------


@dataclass
class Trajectory:
    timestamps: list[float]
    poses: list[Pose]

    def __post_init__(self):
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        for earlier, later in zip(self.timestamps, self.timestamps[1:]):
            if later <= earlier:
                raise ValueError(
                    f"timestamps must be strictly increasing ({earlier} then {later})"
                )

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses], dtype=np.float64).reshape(-1, 3)


def associate(ts_a, ts_b, max_diff: float = 0.02):
    """Match timestamps by nearest neighbor within ``max_diff`` seconds,
    claiming each timestamp at most once (smallest differences first)."""
    candidates = [
        (abs(a - b), i, j)
        for i, a in enumerate(ts_a)
        for j, b in enumerate(ts_b)
        if abs(a - b) <= max_diff
    ]
    candidates.sort()
    taken_a, taken_b = set(), set()
    matches = []
    for _, i, j in candidates:
        if i in taken_a or j in taken_b:
            continue
        taken_a.add(i)
        taken_b.add(j)
        matches.append((i, j))
    matches.sort()
    return matches


def ate_rmse(est: Trajectory, gt: Trajectory, max_diff: float = 0.02) -> float:
    """RMSE of translation residuals after Sim(3) alignment of the matched
    estimated positions onto ground truth. Meters."""
    pairs = associate(est.timestamps, gt.timestamps, max_diff)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} matched pose pairs; need at least 3")
    e = est.positions()[[i for i, _ in pairs]]
    g = gt.positions()[[j for _, j in pairs]]
    sim = umeyama_sim3(e, g)
    residuals = g - sim3_apply(sim, e)
    return float(np.sqrt(np.mean(np.sum(residuals * residuals, axis=1))))


def pose_recall(est_poses, gt_poses, thresholds=DEFAULT_RECALL_THRESHOLDS):
    """Fraction of poses within each (cm, degree) tolerance after a single
    Sim(3) gauge alignment of the whole set.

    A pose counts as correct at (c, d) only if both its translation error
    is <= c centimeters and its geodesic rotation error is <= d degrees.
    """
    est_poses = list(est_poses)
    gt_poses = list(gt_poses)
    if len(est_poses) != len(gt_poses):
        raise ValueError("estimated and ground-truth pose counts differ")
    if len(est_poses) < 3:
        raise ValueError(f"at least 3 pose pairs required, got {len(est_poses)}")
    e = np.array([p.translation for p in est_poses])
    g = np.array([p.translation for p in gt_poses])
    sim = umeyama_sim3(e, g)
    t_err = np.linalg.norm(g - sim3_apply(sim, e), axis=1)
    r_err = np.array(
        [
            rotation_geodesic_deg(sim.rotation @ pe.rotation, pg.rotation)
            for pe, pg in zip(est_poses, gt_poses)
        ]
    )
    recalls = []
    for cm, deg in thresholds:
        ok = (t_err <= cm / 100.0) & (r_err <= deg)
        recalls.append(float(np.mean(ok)))
    return recalls


# ---- quaternions and TUM text format ----------------------------------------


def quaternion_to_rotation(x: float, y: float, z: float, w: float) -> np.ndarray:
    q = np.array([x, y, z, w], dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    x, y, z, w = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quaternion(r: np.ndarray):
    """Return (x, y, z, w) with w >= 0, using the numerically largest
    component as pivot."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    if w < 0:
        x, y, z, w = -x, -y, -z, -w
    return x, y, z, w


def write_tum(path, trajectory: Trajectory) -> None:
    with open(path, "w") as fh:
        for ts, pose in zip(trajectory.timestamps, trajectory.poses):
            tx, ty, tz = pose.translation
            qx, qy, qz, qw = rotation_to_quaternion(pose.rotation)
            fh.write(
                f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n"
            )


def read_tum(path) -> Trajectory:
    timestamps, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(
                    f"{path}:{lineno}: expected 8 fields "
                    f"(timestamp tx ty tz qx qy qz qw), got {len(parts)}"
                )
            ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            timestamps.append(ts)
            poses.append(Pose(quaternion_to_rotation(qx, qy, qz, qw), (tx, ty, tz)))
    return Trajectory(timestamps, poses)


# ---- metric reports ----------------------------------------------------------


def evaluate_trajectories(
    est: Trajectory,
    gt: Trajectory,
    max_diff: float = 0.02,
    thresholds=DEFAULT_RECALL_THRESHOLDS,
) -> dict:
    """ATE plus recall over the associated poses of two trajectories."""
    pairs = associate(est.timestamps, gt.timestamps, max_diff)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} matched pose pairs; need at least 3")
    metrics = {
        "matched_pairs": len(pairs),
        "ate_rmse_m": ate_rmse(est, gt, max_diff),
    }
    est_sel = [est.poses[i] for i, _ in pairs]
    gt_sel = [gt.poses[j] for _, j in pairs]
    for (cm, deg), value in zip(thresholds, pose_recall(est_sel, gt_sel, thresholds)):
        metrics[f"recall_{cm:g}cm_{deg:g}deg"] = value
    return metrics


def format_report(metrics: dict) -> str:
    lines = []
    for key, value in metrics.items():
        if isinstance(value, float):
            lines.append(f"{key}={value:.9f}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
