"""Voxel phantoms and DRR rendering (thresholded line integrals through a voxel grid)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpec
from .geometry import Intrinsics, Pose
from .kernels.march import drr_integrate, ray_box_chord, trilinear_np

__all__ = [
    "Volume",
    "ProjectionImage",
    "PhantomSpec",
    "generate_phantom",
    "spine_primitives",
    "analytic_dense_fraction",
    "sample_volume",
    "camera_rays",
    "render_drr",
    "save_volume",
    "load_volume",
]


@dataclass(eq=False)
class Volume:
    """Axis-aligned grid; ``values[ix, iy, iz]``, ``origin`` is the center of voxel (0, 0, 0)."""

    values: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), 3).copy()
        self.origin = np.broadcast_to(np.asarray(self.origin, dtype=np.float64), 3).copy()
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InvalidSpec(f"volume must be 3D with every axis >= 1, got {self.values.shape}")
        if np.any(self.spacing <= 0):
            raise InvalidSpec("voxel spacing must be positive")

    @property
    def dims(self):
        return tuple(int(n) for n in self.values.shape)

    @property
    def lower(self):
        """Lower corner of the voxel cells (world)."""
        return self.origin - 0.5 * self.spacing

    @property
    def upper(self):
        return self.origin + (np.array(self.dims) - 0.5) * self.spacing

    def centers(self, axis):
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def center_grid(self):
        xs, ys, zs = (self.centers(a) for a in range(3))
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)


@dataclass(eq=False)
class ProjectionImage:
    """Line-integral image; ``pixels[row, col]`` with rows along ``v``."""

    pixels: np.ndarray
    K: Intrinsics | None = None
    pose: Pose | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.K is not None and self.pixels.shape != (self.K.height, self.K.width):
            raise InvalidSpec(
                f"image shape {self.pixels.shape} does not match intrinsics {self.K.height}x{self.K.width}"
            )

    @property
    def camera(self):
        return self.K, self.pose


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    kind: str = "spine"  # "spine" | "ellipsoids"
    dims: tuple = (64, 64, 64)
    spacing: tuple = (2.0, 2.0, 2.0)
    peak: float = 1.0
    seed: int = 0
    jitter: float = 0.0  # relative random perturbation of spine primitives


# modified 3D Shepp-Logan: value, semi-axes (a, b, c), center, rotation about z (deg)
_SHEPP_LOGAN = [
    (1.00, (0.6900, 0.920, 0.810), (0.00, 0.0000, 0.00), 0.0),
    (-0.80, (0.6624, 0.874, 0.780), (0.00, -0.0184, 0.00), 0.0),
    (-0.20, (0.1100, 0.310, 0.220), (0.22, 0.0000, 0.00), -18.0),
    (-0.20, (0.1600, 0.410, 0.280), (-0.22, 0.0000, 0.00), 18.0),
    (0.10, (0.2100, 0.250, 0.410), (0.00, 0.3500, -0.15), 0.0),
    (0.10, (0.0460, 0.046, 0.050), (0.00, 0.1000, 0.25), 0.0),
    (0.10, (0.0460, 0.046, 0.050), (0.00, -0.1000, 0.25), 0.0),
    (0.10, (0.0460, 0.023, 0.050), (-0.08, -0.6050, 0.00), 0.0),
    (0.10, (0.0230, 0.023, 0.020), (0.00, -0.6060, 0.00), 0.0),
    (0.10, (0.0230, 0.046, 0.020), (0.06, -0.6050, 0.00), 0.0),
]

_SOFT_TISSUE = 0.15
_BONE = 1.0


def _unit_grid(dims):
    axes = [-1.0 + (np.arange(n) + 0.5) * 2.0 / n for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def spine_primitives(spec: PhantomSpec):
    """Dense primitives of the spine phantom in unit-cube coordinates.

    Returns a list of ``("cylinder", (cx, cy, z0, z1, r))`` and
    ``("box", (x0, x1, y0, y1, z0, z1))`` tuples.  Extents are multiples of
    1/16 so that box faces fall on voxel faces for power-of-two grids.
    """
    rng = np.random.default_rng(spec.seed)
    prims = []
    for zc in (-0.75, -0.375, 0.0, 0.375, 0.75):
        jit = spec.jitter * rng.uniform(-1, 1, size=2)
        r = 0.22 * (1 + jit[0])
        cx = 0.05 * jit[1]
        prims.append(("cylinder", (cx, 0.1, zc - 0.15625, zc + 0.15625, r)))
        prims.append(("box", (cx - 0.0625, cx + 0.0625, -0.5625, -0.125, zc - 0.0625, zc + 0.0625)))
        prims.append(("box", (cx + 0.125, cx + 0.4375, -0.25, -0.125, zc - 0.0625, zc + 0.0625)))
        prims.append(("box", (cx - 0.4375, cx - 0.125, -0.25, -0.125, zc - 0.0625, zc + 0.0625)))
    return prims


def analytic_dense_fraction(spec: PhantomSpec) -> float:
    """Volume fraction of the (disjoint) dense primitives inside the unit cube."""
    total = 0.0
    for kind, p in spine_primitives(spec):
        if kind == "cylinder":
            _, _, z0, z1, r = p
            total += math.pi * r * r * (z1 - z0)
        else:
            x0, x1, y0, y1, z0, z1 = p
            total += (x1 - x0) * (y1 - y0) * (z1 - z0)
    return total / 8.0


def _spine(spec):
    x, y, z = _unit_grid(spec.dims)
    vol = np.where((x / 0.9) ** 2 + (y / 0.8) ** 2 <= 1.0, _SOFT_TISSUE, 0.0)
    for kind, p in spine_primitives(spec):
        if kind == "cylinder":
            cx, cy, z0, z1, r = p
            m = ((x - cx) ** 2 + (y - cy) ** 2 <= r * r) & (z >= z0) & (z <= z1)
        else:
            x0, x1, y0, y1, z0, z1 = p
            m = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1) & (z >= z0) & (z <= z1)
        vol[m] = _BONE
    return vol


def _ellipsoids(spec):
    x, y, z = _unit_grid(spec.dims)
    vol = np.zeros(x.shape)
    for value, (a, b, c), (x0, y0, z0), phi in _SHEPP_LOGAN:
        cp, sp = math.cos(math.radians(phi)), math.sin(math.radians(phi))
        xr = cp * (x - x0) + sp * (y - y0)
        yr = -sp * (x - x0) + cp * (y - y0)
        inside = (xr / a) ** 2 + (yr / b) ** 2 + ((z - z0) / c) ** 2 <= 1.0
        vol[inside] += value
    return np.clip(vol, 0.0, 1.0)


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Synthetic volume centered on the world origin.  Values lie in ``[0, spec.peak]``."""
    dims = tuple(int(n) for n in spec.dims)
    if len(dims) != 3 or min(dims) < 8:
        raise InvalidSpec(f"phantom dims must be at least 8 per axis, got {spec.dims}")
    if spec.kind == "spine":
        vals = _spine(spec)
    elif spec.kind in ("ellipsoids", "shepp-logan"):
        vals = _ellipsoids(spec)
    else:
        raise InvalidSpec(f"unknown phantom kind {spec.kind!r}")
    spacing = np.asarray(spec.spacing, dtype=float)
    origin = -0.5 * (np.array(dims) - 1) * spacing
    return Volume(vals * spec.peak, spacing, origin)


# ---------------------------------------------------------------------------
# sampling and DRRs
# ---------------------------------------------------------------------------


def sample_volume(v: Volume, x):
    """Trilinear interpolation between voxel centers.

    Inside the half-voxel rim of the grid the nearest edge value is held;
    beyond the voxel cells the result is 0.  Accepts ``(3,)`` or ``(..., 3)``.
    """
    x = np.asarray(x, dtype=float)
    out = trilinear_np(v.values, (x - v.origin) / v.spacing)
    return float(out) if x.ndim == 1 else out


def camera_rays(K: Intrinsics, pose: Pose):
    """Unit world directions through every pixel center, shape ``(H, W, 3)``."""
    u = np.arange(K.width) + 0.5
    w = np.arange(K.height) + 0.5
    uu, vv = np.meshgrid(u, w)
    d_cam = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    d = d_cam @ pose.R  # R^T applied to each row vector
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def render_drr(v: Volume, camera, threshold: float = 0.0, step: float | None = None) -> ProjectionImage:
    """Integrate ``A * [A > threshold]`` along every pixel ray through the grid cells.

    ``step`` defaults to half the smallest voxel spacing.
    """
    K, pose = camera
    if step is None:
        step = 0.5 * float(v.spacing.min())
    if not step > 0:
        raise InvalidSpec("integration step must be positive")
    dirs = camera_rays(K, pose)
    t0, t1 = ray_box_chord(pose.X_o, dirs, v.lower, v.upper)
    img = drr_integrate(v.values, v.origin, v.spacing, pose.X_o, dirs, t0, t1, threshold, step)
    return ProjectionImage(img, K, pose)


# ---------------------------------------------------------------------------
# raw volume + JSON sidecar
# ---------------------------------------------------------------------------


def save_volume(path, v: Volume):
    """Write ``<path>.raw`` (float32 LE, x fastest) and ``<path>.json``."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    v.values.astype("<f4").ravel(order="F").tofile(raw)
    meta = {
        "dims": list(v.dims),
        "spacing_mm": v.spacing.tolist(),
        "origin_mm": v.origin.tolist(),
        "order": "x-fastest",
        "dtype": "float32-le",
        "raw": raw.name,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return raw


def load_volume(path) -> Volume:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("order", "x-fastest") != "x-fastest":
        raise InvalidSpec(f"unsupported voxel order {meta['order']!r}")
    raw = path.parent / meta.get("raw", path.with_suffix(".raw").name)
    dims = tuple(meta["dims"])
    data = np.fromfile(raw, dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise InvalidSpec(f"{raw} holds {data.size} values, expected {int(np.prod(dims))}")
    return Volume(data.reshape(dims, order="F").astype(np.float64), meta["spacing_mm"], meta["origin_mm"])
