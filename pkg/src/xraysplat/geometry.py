"""Cone-beam camera model, projection-matrix calibration and acquisition trajectories.

Convention (used everywhere in the package):

* camera coordinates ``x_cam = R @ (x_world - X_o)``, the source sits at ``X_o``
  and the camera looks along ``+z``;
* pixels are continuous coordinates, pixel ``(i, j)`` covers
  ``[i, i+1) x [j, j+1)`` so its center is ``(i + 0.5, j + 0.5)``;
* ``P ~ K @ R @ [I | -X_o]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    BehindSource,
    CalibrationFailed,
    DegenerateConfiguration,
    DegenerateProjection,
    InsufficientPoints,
    InvalidSpec,
)

__all__ = [
    "Intrinsics",
    "Pose",
    "Ray",
    "FiducialCorrespondences",
    "TrajectorySpec",
    "compose_projection",
    "decompose_projection",
    "canonical_projection",
    "project_points",
    "pixel_ray",
    "ray_space_jacobian",
    "ray_space_map",
    "dlt_estimate",
    "ransac_calibrate",
    "reprojection_errors",
    "look_at",
    "generate_trajectory",
    "save_poses",
    "load_poses",
    "save_correspondences",
    "load_correspondences",
]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidSpec(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidSpec(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidSpec(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def from_matrix(cls, K, width, height) -> "Intrinsics":
        K = np.asarray(K, dtype=float)
        K = K / K[2, 2]
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world->camera rotation ``R`` and source position ``X_o`` (world mm)."""

    R: np.ndarray
    X_o: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        X = np.array(self.X_o, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise InvalidSpec("pose rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidSpec("pose rotation must have det +1")
        if not np.all(np.isfinite(X)):
            raise InvalidSpec("pose origin must be finite")
        R.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "X_o", X)

    @property
    def translation(self) -> np.ndarray:
        """Translation of the world->camera map, ``-R @ X_o``."""
        return -self.R @ self.X_o

    def to_camera(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return (points - self.X_o) @ self.R.T


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray


@dataclass
class FiducialCorrespondences:
    points3d: np.ndarray
    points2d: np.ndarray

    def __post_init__(self):
        self.points3d = np.asarray(self.points3d, dtype=float).reshape(-1, 3)
        self.points2d = np.asarray(self.points2d, dtype=float).reshape(-1, 2)
        if len(self.points3d) != len(self.points2d):
            raise InvalidSpec(
                f"{len(self.points3d)} 3D points but {len(self.points2d)} 2D points"
            )

    def __len__(self):
        return len(self.points3d)


# ---------------------------------------------------------------------------
# projection matrices
# ---------------------------------------------------------------------------


def canonical_projection(P) -> np.ndarray:
    """Scale ``P`` so that ``||P[2, :3]|| = 1`` and points in front have ``w > 0``."""
    P = np.asarray(P, dtype=float)
    n = np.linalg.norm(P[2, :3])
    if n == 0:
        raise DegenerateProjection("third row of P has zero direction part")
    P = P / n
    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    return P


def compose_projection(K: Intrinsics, pose: Pose) -> np.ndarray:
    P = K.matrix @ pose.R @ np.hstack([np.eye(3), -pose.X_o[:, None]])
    return canonical_projection(P)


def _rq(M):
    # RQ through QR of the row-reversed transpose
    flip = np.eye(3)[::-1]
    Q, U = np.linalg.qr((flip @ M).T)
    Rm = flip @ U.T @ flip
    Qm = flip @ Q.T
    return Rm, Qm


def decompose_projection(P, width=None, height=None):
    """Factor ``P`` into ``(Intrinsics, Pose)``.

    ``width``/``height`` default to roughly twice the principal point,
    which only matters for the image-size fields of the returned intrinsics.
    """
    P = np.asarray(P, dtype=float)
    if P.shape != (3, 4) or not np.all(np.isfinite(P)):
        raise DegenerateProjection("P must be a finite 3x4 matrix")
    M = P[:, :3]
    scale = np.linalg.norm(M)
    if scale == 0 or abs(np.linalg.det(M)) <= 1e-12 * scale**3:
        raise DegenerateProjection("left 3x3 block of P is singular")
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    Km, Rm = _rq(M)
    D = np.diag(np.sign(np.diag(Km)))
    Km = Km @ D
    Rm = D @ Rm
    if np.linalg.det(Rm) < 0:  # pragma: no cover - excluded by det(M) > 0
        raise DegenerateProjection("could not extract a proper rotation")
    Km = Km / Km[2, 2]
    # re-orthonormalise against round-off
    u, _, vt = np.linalg.svd(Rm)
    Rm = u @ vt
    X_o = -np.linalg.solve(M, P[:, 3])
    if width is None:
        width = max(int(round(2 * Km[0, 2])), int(math.floor(Km[0, 2])) + 1)
    if height is None:
        height = max(int(round(2 * Km[1, 2])), int(math.floor(Km[1, 2])) + 1)
    # skew is not part of the camera model and is dropped
    K = Intrinsics(float(Km[0, 0]), float(Km[1, 1]), float(Km[0, 2]), float(Km[1, 2]), int(width), int(height))
    return K, Pose(Rm, X_o)


def project_points(P, points):
    """Project world points with a 3x4 matrix. Returns ``(uv, w)``."""
    points = np.asarray(points, dtype=float)
    h = points @ P[:, :3].T + P[:, 3]
    w = h[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[..., :2] / w[..., None]
    return uv, w


def reprojection_errors(P, points3d, points2d):
    uv, w = project_points(P, points3d)
    err = np.linalg.norm(uv - np.asarray(points2d, dtype=float), axis=-1)
    return np.where(w > 0, err, np.inf)


def pixel_ray(K: Intrinsics, pose: Pose, pixel) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    d_cam = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    d = pose.R.T @ d_cam
    return Ray(pose.X_o.copy(), d / np.linalg.norm(d))


def ray_space_map(camera_point, K: Intrinsics) -> np.ndarray:
    """Exact ray-space coordinates ``(u, v, distance from source)``."""
    x, y, z = np.asarray(camera_point, dtype=float)
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy, math.sqrt(x * x + y * y + z * z)])


def ray_space_jacobian(camera_point, K: Intrinsics) -> np.ndarray:
    x, y, z = (float(c) for c in camera_point)
    if z <= 0:
        raise BehindSource(f"camera-space depth {z} is not in front of the source")
    l = math.sqrt(x * x + y * y + z * z)
    return np.array(
        [
            [K.fx / z, 0.0, -K.fx * x / (z * z)],
            [0.0, K.fy / z, -K.fy * y / (z * z)],
            [x / l, y / l, z / l],
        ]
    )


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def _similarity_2d(pts):
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _similarity_3d(pts):
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    s = math.sqrt(3) / d if d > 0 else 1.0
    T = np.eye(4) * s
    T[3, 3] = 1.0
    T[:3, 3] = -s * c
    return T


def _design_rows(X, uv):
    """2n x 12 DLT design matrix (works on stacked batches ``(..., n, 3)``)."""
    n = X.shape[-2]
    Xh = np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)
    zeros = np.zeros_like(Xh)
    u = uv[..., 0:1]
    v = uv[..., 1:2]
    r1 = np.concatenate([Xh, zeros, -u * Xh], axis=-1)
    r2 = np.concatenate([zeros, Xh, -v * Xh], axis=-1)
    A = np.stack([r1, r2], axis=-2)
    return A.reshape(X.shape[:-2] + (2 * n, 12))


def _apply_h(T, pts):
    return pts @ T[:-1, :-1].T + T[:-1, -1]


def dlt_estimate(corrs: FiducialCorrespondences) -> np.ndarray:
    """Normalised DLT estimate of the 3x4 projection matrix (canonical scale)."""
    X, uv = corrs.points3d, corrs.points2d
    if len(X) < 6:
        raise InsufficientPoints(f"DLT needs at least 6 correspondences, got {len(X)}")
    T3 = _similarity_3d(X)
    T2 = _similarity_2d(uv)
    Xn = _apply_h(T3, X)
    sv3 = np.linalg.svd(Xn - Xn.mean(axis=0), compute_uv=False)
    if sv3[-1] < 1e-9 * sv3[0]:
        raise DegenerateConfiguration("3D fiducials are coplanar or collinear")
    A = _design_rows(Xn, _apply_h(T2, uv))
    _, s, vt = np.linalg.svd(A)
    if len(s) >= 12 and s[-2] < 1e-10 * s[0]:
        raise DegenerateConfiguration("DLT design matrix has a degenerate null space")
    Pn = vt[-1].reshape(3, 4)
    P = np.linalg.solve(T2, Pn @ T3)
    try:
        return canonical_projection(P)
    except DegenerateProjection as exc:
        raise DegenerateConfiguration(str(exc)) from exc


def ransac_calibrate(
    corrs: FiducialCorrespondences,
    iterations: int = 2000,
    inlier_threshold: float = 2.0,
    seed: int = 0,
):
    """Robust DLT.  Returns ``(P, inlier_mask, inlier_rmse_px)``."""
    X, uv = corrs.points3d, corrs.points2d
    n = len(X)
    if n < 6:
        raise CalibrationFailed(f"RANSAC needs at least 6 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    T3 = _similarity_3d(X)
    T2 = _similarity_2d(uv)
    Xn = _apply_h(T3, X)
    uvn = _apply_h(T2, uv)
    T2inv = np.linalg.inv(T2)

    samples = np.stack([rng.choice(n, size=6, replace=False) for _ in range(int(iterations))])
    A = _design_rows(Xn[samples], uvn[samples])  # (iters, 12, 12)
    _, s, vt = np.linalg.svd(A)
    ok = s[:, -2] > 1e-10 * s[:, 0]
    Pn = vt[:, -1, :].reshape(-1, 3, 4)
    Ps = np.einsum("ij,njk,kl->nil", T2inv, Pn, T3)

    Xh = np.hstack([X, np.ones((n, 1))])
    h = np.einsum("nij,pj->npi", Ps, Xh)
    w = h[..., 2]
    # orientation is ambiguous per hypothesis; accept the majority sign
    sign = np.where(np.sum(w > 0, axis=1) >= np.sum(w < 0, axis=1), 1.0, -1.0)
    w = w * sign[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = h[..., :2] / (h[..., 2:3])
        err = np.linalg.norm(proj - uv[None], axis=-1)
    err = np.where((w > 0) & np.isfinite(err), err, np.inf)
    inl = (err < inlier_threshold) & ok[:, None]
    count = inl.sum(axis=1)
    cost = np.where(inl, err, 0.0).sum(axis=1)
    best = int(np.lexsort((cost, -count))[0])
    if count[best] < 6:
        raise CalibrationFailed("no hypothesis gathered 6 or more inliers")

    mask = inl[best]
    P = None
    for _ in range(5):
        try:
            P = dlt_estimate(FiducialCorrespondences(X[mask], uv[mask]))
        except (DegenerateConfiguration, InsufficientPoints) as exc:
            raise CalibrationFailed(f"inlier refit failed: {exc}") from exc
        new_mask = reprojection_errors(P, X, uv) < inlier_threshold
        if new_mask.sum() < 6 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    e = reprojection_errors(P, X[mask], uv[mask])
    rmse = float(np.sqrt(np.mean(e**2)))
    return P, mask, rmse


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def look_at(source, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose at ``source`` whose principal ray passes through ``target``.

    Image ``v`` grows along ``-up`` so the up direction points to the top row.
    """
    source = np.asarray(source, dtype=float)
    zc = np.asarray(target, dtype=float) - source
    zc /= np.linalg.norm(zc)
    xc = np.cross(zc, np.asarray(up, dtype=float))
    nx = np.linalg.norm(xc)
    if nx < 1e-12:
        raise InvalidSpec("viewing direction is parallel to the up vector")
    xc /= nx
    yc = np.cross(zc, xc)
    return Pose(np.stack([xc, yc, zc]), source)


@dataclass
class TrajectorySpec:
    mode: str = "circular"  # "circular" | "arbitrary"
    n_views: int = 50
    radius: float = 500.0
    center: Sequence[float] = (0.0, 0.0, 0.0)
    intrinsics: Intrinsics = field(
        default_factory=lambda: Intrinsics(300.0, 300.0, 64.0, 64.0, 128, 128)
    )
    seed: int = 0
    transverse_range_deg: float = 102.0
    sagittal_range_deg: float = 25.0


def _source_direction(theta, phi):
    # theta: rotation about world z (0 = source on -y); phi: tilt towards +z
    return np.array(
        [math.sin(theta) * math.cos(phi), -math.cos(theta) * math.cos(phi), math.sin(phi)]
    )


def trajectory_angles(spec: TrajectorySpec):
    """Transverse and sagittal angles in degrees for every view of ``spec``."""
    if spec.n_views < 1:
        raise InvalidSpec("n_views must be >= 1")
    if spec.mode == "circular":
        theta = np.arange(spec.n_views) * (360.0 / spec.n_views)
        phi = np.zeros(spec.n_views)
    elif spec.mode == "arbitrary":
        rng = np.random.default_rng(spec.seed)
        theta = rng.uniform(-spec.transverse_range_deg, spec.transverse_range_deg, spec.n_views)
        phi = rng.uniform(-spec.sagittal_range_deg, spec.sagittal_range_deg, spec.n_views)
    else:
        raise InvalidSpec(f"unknown trajectory mode {spec.mode!r}")
    return theta, phi


def generate_trajectory(spec: TrajectorySpec):
    """List of ``(Intrinsics, Pose)`` looking at ``spec.center``."""
    if not spec.radius > 0:
        raise InvalidSpec(f"radius must be positive, got {spec.radius}")
    theta, phi = trajectory_angles(spec)
    center = np.asarray(spec.center, dtype=float)
    out = []
    for t, p in zip(np.radians(theta), np.radians(phi)):
        src = center + spec.radius * _source_direction(t, p)
        out.append((spec.intrinsics, look_at(src, center)))
    return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def pose_record(K: Intrinsics, pose: Pose) -> dict:
    return {
        "K": K.matrix.tolist(),
        "R": pose.R.tolist(),
        "X_o": pose.X_o.tolist(),
        "width": K.width,
        "height": K.height,
    }


def pose_from_record(rec) -> tuple[Intrinsics, Pose]:
    K = Intrinsics.from_matrix(rec["K"], rec["width"], rec["height"])
    return K, Pose(np.asarray(rec["R"], dtype=float), np.asarray(rec["X_o"], dtype=float))


def save_poses(path, cameras):
    Path(path).write_text(json.dumps([pose_record(K, p) for K, p in cameras], indent=1))


def load_poses(path):
    return [pose_from_record(r) for r in json.loads(Path(path).read_text())]


def save_correspondences(path, corrs: FiducialCorrespondences):
    Path(path).write_text(
        json.dumps({"points3d": corrs.points3d.tolist(), "points2d": corrs.points2d.tolist()}, indent=1)
    )


def load_correspondences(path) -> FiducialCorrespondences:
    data = json.loads(Path(path).read_text())
    return FiducialCorrespondences(data["points3d"], data["points2d"])
