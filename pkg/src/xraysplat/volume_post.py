"""Scene -> voxel volume, percentile thresholding/cropping, slice export and view evaluation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidCrop, PreconditionError
from .kernels.voxel import bin_tiles3, voxel_boxes, voxelize_backward, voxelize_forward
from .metrics import psnr, ssim
from .phantom import Volume
from .projector import KernelGradients, cov_backward, render
from .scene import SplatScene, covariances, sigmoid

__all__ = [
    "Grid",
    "voxelize",
    "voxelize_scene_units",
    "voxelize_backward_scene",
    "threshold_and_crop",
    "nearest_rank",
    "export_slices",
    "write_slices",
    "EvaluationReport",
    "evaluate",
    "psnr",
    "ssim",
]

DEFAULT_CUTOFF = 4.5  # 3 sigma truncates ~1% of a kernel peak


@dataclass
class Grid:
    """Voxel grid: ``origin`` is the center of voxel (0, 0, 0)."""

    dims: tuple
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"grid dims must be >= 1 on every axis, got {self.dims}")
        self.spacing = tuple(float(s) for s in np.broadcast_to(self.spacing, 3))
        self.origin = tuple(float(o) for o in np.broadcast_to(self.origin, 3))

    @classmethod
    def covering(cls, lo, hi, dims):
        """Grid of ``dims`` cells tiling the box ``[lo, hi]``."""
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        spacing = (hi - lo) / np.asarray(dims)
        return cls(dims, spacing, lo + 0.5 * spacing)


@dataclass
class VoxelContext:
    binning: tuple
    boxes: np.ndarray
    conic: np.ndarray
    origin: np.ndarray
    spacing: np.ndarray
    dims: tuple
    cutoff: float


def voxelize_scene_units(scene: SplatScene, dims, spacing, origin, cutoff=DEFAULT_CUTOFF):
    """Mixture density (per scene unit) at the centers of a scene-unit grid."""
    dims = tuple(int(d) for d in dims)
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), 3).copy()
    if len(scene) == 0:
        return np.zeros(dims), None
    cov = covariances(scene)
    conic = np.ascontiguousarray(np.linalg.inv(cov))
    boxes = voxel_boxes(scene.positions, cov, origin, spacing, dims, cutoff)
    binning = bin_tiles3(boxes, dims)
    vol = voxelize_forward(binning, scene.positions, conic, scene.density, boxes, origin, spacing, dims, cutoff)
    return vol, VoxelContext(binning, boxes, conic, origin, spacing, dims, float(cutoff))


def voxelize_backward_scene(scene: SplatScene, ctx: VoxelContext | None, grad_vol) -> KernelGradients:
    m = len(scene)
    grads = KernelGradients.zeros(m)
    if ctx is None or m == 0:
        return grads
    per = voxelize_backward(
        ctx.binning, scene.positions, ctx.conic, scene.density, ctx.boxes, ctx.origin, ctx.spacing, ctx.dims, ctx.cutoff, grad_vol
    )
    A = ctx.conic
    gA = np.empty((m, 3, 3))
    gA[:, 0, 0], gA[:, 1, 1], gA[:, 2, 2] = per[:, 4], per[:, 5], per[:, 6]
    gA[:, 0, 1] = gA[:, 1, 0] = 0.5 * per[:, 7]
    gA[:, 0, 2] = gA[:, 2, 0] = 0.5 * per[:, 8]
    gA[:, 1, 2] = gA[:, 2, 1] = 0.5 * per[:, 9]
    g_cov = -A @ gA @ A
    grads.log_scales, grads.rotations = cov_backward(g_cov, scene)
    grads.positions = per[:, 1:4].copy()
    grads.raw_density = per[:, 0] * sigmoid(scene.raw_density)
    return grads


def voxelize(scene: SplatScene, grid: Grid, cutoff=DEFAULT_CUTOFF) -> Volume:
    """Density volume on a world grid (values per world unit of length)."""
    tr = scene.world_transform
    origin_s = tr.to_scene(grid.origin)
    spacing_s = np.asarray(grid.spacing) / tr.scale
    vol, _ = voxelize_scene_units(scene, grid.dims, spacing_s, origin_s, cutoff)
    return Volume(vol / tr.scale, grid.spacing, grid.origin)


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------


def nearest_rank(values, percentile: float) -> float:
    """Value at rank ``ceil(p/100 * n)`` (1-based) of the sorted values; ``p = 0`` gives the minimum."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("empty array")
    rank = max(1, int(math.ceil(percentile / 100.0 * v.size)))
    return float(v[rank - 1])


def threshold_and_crop(v: Volume, percentile: float = 80.0, crop=None) -> Volume:
    """Zero voxels ``<= tau`` (nearest-rank percentile), then crop to ``((x0, x1), (y0, y1), (z0, z1))``.

    Crop ranges are half-open voxel index intervals; ``percentile=None`` only crops.
    """
    if percentile is None:
        vals = v.values.copy()
    elif 0.0 <= percentile <= 100.0:
        tau = nearest_rank(v.values, percentile)
        vals = np.where(v.values <= tau, 0.0, v.values)
    else:
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    origin = v.origin.copy()
    if crop is not None:
        crop = [tuple(int(c) for c in r) for r in crop]
        if len(crop) != 3:
            raise InvalidCrop("crop needs one (start, stop) range per axis")
        for (a, b), n in zip(crop, v.dims):
            if not (0 <= a < b <= n):
                raise InvalidCrop(f"crop range {(a, b)} invalid for axis of size {n}")
        (x0, x1), (y0, y1), (z0, z1) = crop
        vals = vals[x0:x1, y0:y1, z0:z1]
        origin = origin + np.array([x0, y0, z0]) * v.spacing
    return Volume(vals, v.spacing.copy(), origin)


_AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


def export_slices(v: Volume, axis: str, window=None):
    """16-bit slices along ``axis``; ``window = (lo, hi)`` defaults to ``(0, p99.5)``.

    Axial slices (constant z) are ``(ny, nx)`` images with rows along y;
    coronal ``(nz, nx)`` and sagittal ``(nz, ny)`` are flipped so +z is up.
    """
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {sorted(_AXES)}")
    if window is None:
        window = (0.0, float(np.percentile(v.values, 99.5)))
    lo, hi = window
    span = hi - lo
    if span > 0:
        scaled = np.clip((v.values - lo) / span, 0.0, 1.0)
    else:
        scaled = np.zeros_like(v.values)
    q = np.round(scaled * 65535.0).astype(np.uint16)
    a = _AXES[axis]
    out = []
    for i in range(v.dims[a]):
        if a == 2:
            out.append(q[:, :, i].T.copy())
        elif a == 1:
            out.append(q[:, i, :].T[::-1].copy())
        else:
            out.append(q[i, :, :].T[::-1].copy())
    return out


def write_slices(v: Volume, out_dir, axes=("axial", "coronal", "sagittal"), window=None):
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for axis in axes:
        for i, img in enumerate(export_slices(v, axis, window)):
            p = out_dir / f"{axis}_{i:04}.png"
            Image.fromarray(img).save(p)
            paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvaluationReport:
    psnr: list
    ssim: list
    data_range: float
    data_range_policy: str = "max-of-targets"
    config: dict = field(default_factory=dict)

    @property
    def n_views(self):
        return len(self.psnr)

    @property
    def psnr_mean(self):
        return float(np.mean(self.psnr))

    @property
    def psnr_std(self):
        p = np.asarray(self.psnr, dtype=float)
        if np.all(p == p[0]):  # also covers an all-infinite (self-comparison) report
            return 0.0
        with np.errstate(invalid="ignore"):
            return float(np.std(p))

    @property
    def ssim_mean(self):
        return float(np.mean(self.ssim))

    @property
    def ssim_std(self):
        return float(np.std(self.ssim))

    def as_dict(self):
        return {
            "n_views": self.n_views,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "psnr_mean": self.psnr_mean,
            "psnr_std": self.psnr_std,
            "ssim_mean": self.ssim_mean,
            "ssim_std": self.ssim_std,
            "data_range": self.data_range,
            "data_range_policy": self.data_range_policy,
            "config": self.config,
        }

    def save(self, stem):
        stem = Path(stem)
        d = _json_safe(self.as_dict())
        stem.with_suffix(".json").write_text(json.dumps(d, indent=1, allow_nan=False))
        with open(stem.with_suffix(".csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["view", "psnr", "ssim"])
            for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
                w.writerow([i, repr(p), repr(s)])
            w.writerow(["mean", repr(self.psnr_mean), repr(self.ssim_mean)])
            w.writerow(["std", repr(self.psnr_std), repr(self.ssim_std)])


def _json_safe(o):
    """Plain JSON types; infinite PSNR becomes the string ``"inf"``."""
    if isinstance(o, dict):
        return {str(k): _json_safe(v) for k, v in o.items()}
    if isinstance(o, (list, tuple, np.ndarray)):
        return [_json_safe(v) for v in o]
    if isinstance(o, (np.floating, np.integer)):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
    if o is None or isinstance(o, (bool, int, float, str)):
        return o
    return str(o)


def evaluate(scene: SplatScene, testset, data_range=None, config=None) -> EvaluationReport:
    """Render every held-out camera and score it against its target.

    ``testset`` is a list of ``(camera, target_pixels)``; ``data_range``
    defaults to the maximum over all targets.
    """
    if not testset:
        raise PreconditionError("evaluation needs at least one held-out view")
    targets = [np.asarray(getattr(t, "pixels", t), dtype=float) for _, t in testset]
    policy = "max-of-targets" if data_range is None else "fixed"
    if data_range is None:
        data_range = max(float(t.max()) for t in targets)
        if data_range <= 0:
            data_range = 1.0
    ps, ss = [], []
    for (cam, _), tgt in zip(testset, targets):
        img = render(scene, cam).pixels
        ps.append(psnr(img, tgt, data_range))
        ss.append(ssim(img, tgt, data_range))
    return EvaluationReport(ps, ss, float(data_range), policy, dict(config or {}))
