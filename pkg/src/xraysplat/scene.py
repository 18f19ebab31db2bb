"""Learnable 3D Gaussian density mixture.

Kernels live in normalized scene units (the reconstruction box maps to
``[-1, 1]^3``).  Parameters are stored struct-of-arrays:

* ``positions``    ``(M, 3)``
* ``log_scales``   ``(M, 3)`` per-axis log standard deviation
* ``rotations``    ``(M, 4)`` versor ``(w, x, y, z)``; normalised before use
* ``raw_density``  ``(M,)``   density ``rho = softplus(raw_density)``

Densities are per scene unit of length, so a line integral through the
scene measured in scene units is dimensionless.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpec

SCENE_FORMAT_VERSION = 1

__all__ = [
    "WorldTransform",
    "GaussianKernel",
    "SplatScene",
    "softplus",
    "softplus_inv",
    "quat_to_rotmat",
    "kernel_covariance",
    "covariances",
    "init_random",
    "scene_density",
    "save_scene",
    "load_scene",
]


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    # log(exp(y) - 1), stable for large y
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def quat_to_rotmat(q):
    """Rotation matrices from (not necessarily unit) versors ``(..., 4)`` in ``w, x, y, z`` order."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True)
class WorldTransform:
    """Similarity ``x_world = scale * x_scene + translation``."""

    scale: float = 1.0
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidSpec("world transform scale must be positive")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    def to_world(self, x):
        return self.scale * np.asarray(x, dtype=float) + np.asarray(self.translation)

    def to_scene(self, x):
        return (np.asarray(x, dtype=float) - np.asarray(self.translation)) / self.scale

    def as_dict(self):
        return {"scale": self.scale, "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["scale"]), tuple(d["translation"]))


@dataclass
class GaussianKernel:
    position: np.ndarray
    log_scales: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    raw_density: float = 0.0

    @property
    def density(self) -> float:
        return float(softplus(self.raw_density))


def kernel_covariance(k: GaussianKernel) -> np.ndarray:
    R = quat_to_rotmat(k.rotation)
    S = np.exp(np.asarray(k.log_scales, dtype=float))
    M = R * S[None, :]
    return M @ M.T


class SplatScene:
    """Mutable container of kernel parameters plus the scene box and world mapping."""

    def __init__(
        self,
        positions,
        log_scales,
        rotations,
        raw_density,
        bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
        world_transform: WorldTransform | None = None,
    ):
        self.positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        m = len(self.positions)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(m, 3)
        self.rotations = np.array(rotations, dtype=np.float64).reshape(m, 4)
        self.raw_density = np.array(raw_density, dtype=np.float64).reshape(m)
        self.bbox = np.array(bbox, dtype=np.float64).reshape(2, 3)
        self.world_transform = world_transform or WorldTransform()

    # -- construction -----------------------------------------------------
    @classmethod
    def empty(cls, **kw):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), **kw)

    @classmethod
    def from_kernels(cls, kernels, **kw):
        if not kernels:
            return cls.empty(**kw)
        return cls(
            [k.position for k in kernels],
            [k.log_scales for k in kernels],
            [k.rotation for k in kernels],
            [k.raw_density for k in kernels],
            **kw,
        )

    def kernel(self, i) -> GaussianKernel:
        return GaussianKernel(
            self.positions[i].copy(), self.log_scales[i].copy(), self.rotations[i].copy(), float(self.raw_density[i])
        )

    def copy(self) -> "SplatScene":
        return SplatScene(
            self.positions, self.log_scales, self.rotations, self.raw_density, self.bbox, self.world_transform
        )

    def subset(self, idx) -> "SplatScene":
        return SplatScene(
            self.positions[idx],
            self.log_scales[idx],
            self.rotations[idx],
            self.raw_density[idx],
            self.bbox,
            self.world_transform,
        )

    def concat(self, other: "SplatScene") -> "SplatScene":
        return SplatScene(
            np.vstack([self.positions, other.positions]),
            np.vstack([self.log_scales, other.log_scales]),
            np.vstack([self.rotations, other.rotations]),
            np.concatenate([self.raw_density, other.raw_density]),
            self.bbox,
            self.world_transform,
        )

    def __len__(self):
        return len(self.positions)

    # -- derived quantities ------------------------------------------------
    @property
    def density(self):
        return softplus(self.raw_density)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def rotation_matrices(self):
        return quat_to_rotmat(self.rotations)

    def normalize_rotations(self):
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def scaled_densities(self, factor):
        out = self.copy()
        out.raw_density = softplus_inv(self.density * factor)
        return out


def covariances(scene: SplatScene) -> np.ndarray:
    R = scene.rotation_matrices()
    M = R * scene.scales[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def init_random(
    bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
    n: int = 50_000,
    density_range=(0.005, 0.015),
    scale_init: float = 0.02,
    seed: int = 0,
    world_transform: WorldTransform | None = None,
) -> SplatScene:
    """Uniform positions in ``bbox``, uniform densities, isotropic scales, identity rotations."""
    if n < 1:
        raise InvalidSpec("scene needs at least one kernel")
    lo, hi = np.asarray(density_range, dtype=float)
    if not (0 < lo <= hi):
        raise InvalidSpec(f"density range must satisfy 0 < lo <= hi, got {density_range}")
    if not scale_init > 0:
        raise InvalidSpec("scale_init must be positive")
    bbox = np.asarray(bbox, dtype=float).reshape(2, 3)
    rng = np.random.default_rng(seed)
    pos = rng.uniform(bbox[0], bbox[1], size=(n, 3))
    rho = rng.uniform(lo, hi, size=n)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return SplatScene(
        pos,
        np.full((n, 3), math.log(scale_init)),
        rot,
        softplus_inv(rho),
        bbox=bbox,
        world_transform=world_transform,
    )


def scene_density(s: SplatScene, x, chunk: int = 4096):
    """Untruncated mixture density at scene-unit points ``x`` (``(3,)`` or ``(N, 3)``)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    out = np.zeros(len(pts))
    if len(s):
        conic = np.linalg.inv(covariances(s))
        rho = s.density
        for a in range(0, len(s), chunk):
            d = pts[:, None, :] - s.positions[None, a : a + chunk]
            q = np.einsum("nmi,mij,nmj->nm", d, conic[a : a + chunk], d)
            out += np.exp(-0.5 * q) @ rho[a : a + chunk]
    return float(out[0]) if single else out.reshape(x.shape[:-1])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def scene_to_dict(s: SplatScene) -> dict:
    return {
        "version": SCENE_FORMAT_VERSION,
        "bbox": s.bbox.tolist(),
        "world_transform": s.world_transform.as_dict(),
        "kernels": [
            {
                "p": s.positions[i].tolist(),
                "log_scales": s.log_scales[i].tolist(),
                "rotation": s.rotations[i].tolist(),
                "raw_density": float(s.raw_density[i]),
            }
            for i in range(len(s))
        ],
    }


def scene_from_dict(d: dict) -> SplatScene:
    if "version" not in d:
        raise InvalidSpec("scene checkpoint lacks a version field")
    if int(d["version"]) > SCENE_FORMAT_VERSION:
        raise InvalidSpec(f"unsupported scene checkpoint version {d['version']}")
    ks = d["kernels"]
    kw = dict(
        bbox=d.get("bbox", ((-1, -1, -1), (1, 1, 1))),
        world_transform=WorldTransform.from_dict(d["world_transform"]),
    )
    if not ks:
        return SplatScene.empty(**kw)
    return SplatScene(
        [k["p"] for k in ks],
        [k["log_scales"] for k in ks],
        [k["rotation"] for k in ks],
        [k["raw_density"] for k in ks],
        **kw,
    )


def save_scene(path, s: SplatScene):
    Path(path).write_text(json.dumps(scene_to_dict(s)))


def load_scene(path) -> SplatScene:
    return scene_from_dict(json.loads(Path(path).read_text()))
