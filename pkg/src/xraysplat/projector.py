"""Rectified splatting forward projector and its reverse-mode derivative.

Each kernel is moved scene -> world -> camera, linearised in ray space
(pixel u, pixel v, distance from the source) and marginalised along the
ray.  The marginal of a 3D Gaussian along its third ray-space axis is a 2D
Gaussian with amplitude ``rho * sqrt(2 pi |cov_ray| / |cov_2d|)``; the
square-root factor is the rectification ``mu``.  With ``M = J W`` and
``det J = fx fy l / z^3`` it reduces to

    mu = sqrt(2 pi) * |det J| * s_w^3 * prod(scales) / sqrt(|cov_2d|)

which is what the batched code evaluates.  Images integrate length in scene
units, hence ``amp = mu * rho / s_w`` (``s_w`` = world units per scene unit).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose
from .kernels.march import mixture_line_integrals, ray_box_chord
from .kernels.raster import TILE, bin_tiles, rasterize, rasterize_backward
from .phantom import ProjectionImage, camera_rays
from .scene import SplatScene, WorldTransform, covariances, sigmoid

__all__ = [
    "Splat2D",
    "CULLED",
    "ProjectedSplats",
    "project_kernel",
    "project_scene",
    "render",
    "render_with_context",
    "render_backward",
    "render_oracle",
    "cov_backward",
    "KernelGradients",
]

SQRT_2PI = math.sqrt(2.0 * math.pi)
COV2D_FLOOR = 1e-8  # px^2, smallest allowed eigenvalue of a 2D footprint
NEAR = 1e-6  # world units; kernels with camera depth below are culled
DEFAULT_CUTOFF = 3.0


class _Culled:
    def __repr__(self):
        return "CULLED"

    def __bool__(self):
        return False


CULLED = _Culled()


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    density2d: float
    depth: float
    mu: float
    mean_ray: np.ndarray
    cov_ray: np.ndarray


@dataclass
class KernelGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    raw_density: np.ndarray
    mean2d_norm: np.ndarray | None = None  # |dL/d mean2d| per kernel, pixel units

    @classmethod
    def zeros(cls, m):
        return cls(np.zeros((m, 3)), np.zeros((m, 3)), np.zeros((m, 4)), np.zeros(m), np.zeros(m))

    def __iadd__(self, other):
        self.positions += other.positions
        self.log_scales += other.log_scales
        self.rotations += other.rotations
        self.raw_density += other.raw_density
        return self

    def flat(self):
        return np.concatenate(
            [self.positions.ravel(), self.log_scales.ravel(), self.rotations.ravel(), self.raw_density.ravel()]
        )


@dataclass
class ProjectedSplats:
    """Batched projection of a scene for one camera, with the intermediates the backward pass needs."""

    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 2, 2), after the eigenvalue floor
    conic: np.ndarray  # (M, 3) a, b, c of the inverse footprint
    amp: np.ndarray  # (M,) rectified 2D amplitude
    mu: np.ndarray  # (M,)
    depth: np.ndarray  # (M,) distance from the source (world units)
    visible: np.ndarray  # (M,) bool
    boxes: np.ndarray  # (M, 4) int pixel box x0, x1, y0, y1 (empty if x1 < x0)
    clamped: np.ndarray  # (M,) footprint floor active
    # intermediates
    t: np.ndarray
    J2: np.ndarray
    N: np.ndarray
    W: np.ndarray
    cov3d: np.ndarray
    K: Intrinsics
    s_w: float


def _camera_linear(pose: Pose, transform: WorldTransform):
    W = transform.scale * pose.R
    b = pose.R @ (np.asarray(transform.translation) - pose.X_o)
    return W, b


def project_scene(scene: SplatScene, camera, cutoff: float = DEFAULT_CUTOFF) -> ProjectedSplats:
    K, pose = camera
    m = len(scene)
    s_w = scene.world_transform.scale
    W, b = _camera_linear(pose, scene.world_transform)
    t = scene.positions @ W.T + b
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    l = np.linalg.norm(t, axis=1)

    J2 = np.zeros((m, 2, 3))
    J2[:, 0, 0] = K.fx / zs
    J2[:, 0, 2] = -K.fx * x / zs**2
    J2[:, 1, 1] = K.fy / zs
    J2[:, 1, 2] = -K.fy * y / zs**2
    N = J2 @ W
    cov3d = covariances(scene)
    cov2d = N @ cov3d @ np.swapaxes(N, 1, 2)

    a, bb, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    half = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + bb * bb, 0.0))
    lam_min = half - rad
    clamped = front & (lam_min < COV2D_FLOOR)
    if np.any(clamped):
        ci = np.flatnonzero(clamped)
        w_, v_ = np.linalg.eigh(cov2d[ci])
        w_ = np.maximum(w_, COV2D_FLOOR)
        cov2d[ci] = (v_ * w_[:, None, :]) @ np.swapaxes(v_, 1, 2)
        a, bb, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det2 = a * c - bb * bb
    det2s = np.where(front, det2, 1.0)
    conic = np.stack([c / det2s, -bb / det2s, a / det2s], axis=1)

    mean2d = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)
    detJ = K.fx * K.fy * l / zs**3
    mu = SQRT_2PI * detJ * s_w**3 * np.prod(scene.scales, axis=1) / np.sqrt(det2s)
    amp = mu * scene.density / s_w

    ru = cutoff * np.sqrt(np.maximum(a, 0.0))
    rv = cutoff * np.sqrt(np.maximum(c, 0.0))
    with np.errstate(invalid="ignore"):
        bx0 = np.ceil(mean2d[:, 0] - ru - 0.5)
        bx1 = np.floor(mean2d[:, 0] + ru - 0.5)
        by0 = np.ceil(mean2d[:, 1] - rv - 0.5)
        by1 = np.floor(mean2d[:, 1] + rv - 0.5)
    bx0 = np.clip(np.nan_to_num(bx0, nan=1.0), 0, K.width)
    bx1 = np.clip(np.nan_to_num(bx1, nan=-1.0), -1, K.width - 1)
    by0 = np.clip(np.nan_to_num(by0, nan=1.0), 0, K.height)
    by1 = np.clip(np.nan_to_num(by1, nan=-1.0), -1, K.height - 1)
    visible = front & (bx1 >= bx0) & (by1 >= by0) & np.isfinite(amp)
    boxes = np.stack([bx0, bx1, by0, by1], axis=1).astype(np.int64)
    boxes[~visible] = (1, 0, 1, 0)
    amp = np.where(visible, amp, 0.0)

    return ProjectedSplats(
        mean2d=mean2d,
        cov2d=cov2d,
        conic=np.ascontiguousarray(conic),
        amp=amp,
        mu=np.where(front, mu, 0.0),
        depth=l,
        visible=visible,
        boxes=boxes,
        clamped=clamped,
        t=t,
        J2=J2,
        N=N,
        W=W,
        cov3d=cov3d,
        K=K,
        s_w=s_w,
    )


def project_kernel(kernel, camera, scene_transform: WorldTransform | None = None, cutoff=DEFAULT_CUTOFF):
    """Single-kernel projection; returns a :class:`Splat2D` or ``CULLED``."""
    scene = SplatScene.from_kernels([kernel], world_transform=scene_transform)
    pj = project_scene(scene, camera, cutoff)
    if not pj.visible[0]:
        return CULLED
    K = camera[0]
    t = pj.t[0]
    x, y, z = t
    l = float(np.linalg.norm(t))
    J = np.vstack([pj.J2[0], t / l])
    Mm = J @ pj.W
    cov_ray = Mm @ pj.cov3d[0] @ Mm.T
    mean_ray = np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy, l])
    return Splat2D(
        mean2d=pj.mean2d[0].copy(),
        cov2d=pj.cov2d[0].copy(),
        density2d=float(pj.amp[0]),
        depth=float(pj.depth[0]),
        mu=float(pj.mu[0]),
        mean_ray=mean_ray,
        cov_ray=cov_ray,
    )


@dataclass
class RenderContext:
    proj: ProjectedSplats
    binning: tuple
    width: int
    height: int


def render_with_context(scene: SplatScene, camera, cutoff: float = DEFAULT_CUTOFF):
    K, _ = camera
    pj = project_scene(scene, camera, cutoff)
    binning = bin_tiles(pj.boxes, K.width, K.height, TILE)
    img = rasterize(binning, pj.mean2d, pj.conic, pj.amp, pj.boxes, K.width, K.height, TILE)
    return img, RenderContext(pj, binning, K.width, K.height)


def render(scene: SplatScene, camera, image_size=None, cutoff: float = DEFAULT_CUTOFF) -> ProjectionImage:
    """Sum of rectified 2D splats at every pixel center."""
    K, pose = camera
    if image_size is not None and tuple(image_size) != (K.width, K.height):
        raise ValueError(f"image size {tuple(image_size)} does not match intrinsics {(K.width, K.height)}")
    img, _ = render_with_context(scene, camera, cutoff)
    return ProjectionImage(img, K, pose)


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

# d R / d (w, x, y, z) for the unit-versor rotation formula, as (row, col, coefficients)
def _rot_grad_to_quat(gR, q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = lambda i, j: gR[:, i, j]
    gw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gx = 2 * (
        y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2)
    )
    gy = 2 * (
        -2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2)
    )
    gz = 2 * (
        -2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1)
    )
    return np.stack([gw, gx, gy, gz], axis=1)


def cov_backward(g_cov, scene: SplatScene):
    """Pull a symmetric ``dL/dSigma`` back to ``(dL/dlog_scales, dL/drotations)``."""
    norm = np.linalg.norm(scene.rotations, axis=1, keepdims=True)
    qn = scene.rotations / norm
    R = scene.rotation_matrices()
    S = scene.scales
    Mm = R * S[:, None, :]
    gM = 2.0 * g_cov @ Mm
    g_S = np.einsum("mri,mri->mi", gM, R)
    g_logs = g_S * S
    gR = gM * S[:, None, :]
    g_qn = _rot_grad_to_quat(gR, qn)
    g_q = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / norm
    return g_logs, g_q


def _sym2(a, b, c):
    out = np.empty(a.shape + (2, 2))
    out[..., 0, 0] = a
    out[..., 0, 1] = b
    out[..., 1, 0] = b
    out[..., 1, 1] = c
    return out


def render_backward(scene: SplatScene, ctx: RenderContext, grad_img) -> KernelGradients:
    """Gradients of ``sum(grad_img * render(scene))`` w.r.t. every kernel parameter."""
    pj = ctx.proj
    m = len(scene)
    grads = KernelGradients.zeros(m)
    if m == 0 or not np.any(pj.visible):
        return grads
    per = rasterize_backward(
        ctx.binning, pj.mean2d, pj.conic, pj.amp, pj.boxes, ctx.width, ctx.height, grad_img
    )
    vis = pj.visible
    g_amp, g_mean = per[:, 0], per[:, 1:3]
    g_conic = _sym2(per[:, 3], 0.5 * per[:, 4], per[:, 5])
    A = _sym2(pj.conic[:, 0], pj.conic[:, 1], pj.conic[:, 2])
    K = pj.K
    t = pj.t
    x, y, z = t[:, 0], t[:, 1], np.where(vis, t[:, 2], 1.0)
    l2 = np.sum(t * t, axis=1)

    # footprint covariance: through the conic and through the amplitude's 1/sqrt(det)
    g_cov2 = -A @ g_conic @ A - 0.5 * (g_amp * pj.amp)[:, None, None] * A
    g_cov2[pj.clamped] = 0.0
    g_cov2[~vis] = 0.0

    N, Wm, cov3 = pj.N, pj.W, pj.cov3d
    g_cov3 = np.swapaxes(N, 1, 2) @ g_cov2 @ N
    g_N = 2.0 * g_cov2 @ N @ cov3
    g_J2 = g_N @ Wm.T

    g_lnamp = np.where(vis, g_amp * pj.amp, 0.0)
    # camera-space point: mean2d, explicit amplitude factors l / z^3, and J2(t)
    g_t = np.einsum("mij,mi->mj", pj.J2, g_mean)
    g_t += g_lnamp[:, None] * t / l2[:, None]
    g_t[:, 2] += -3.0 * g_lnamp / z
    fx, fy = K.fx, K.fy
    g_t[:, 0] += g_J2[:, 0, 2] * (-fx / z**2)
    g_t[:, 1] += g_J2[:, 1, 2] * (-fy / z**2)
    g_t[:, 2] += (
        g_J2[:, 0, 0] * (-fx / z**2)
        + g_J2[:, 0, 2] * (2 * fx * x / z**3)
        + g_J2[:, 1, 1] * (-fy / z**2)
        + g_J2[:, 1, 2] * (2 * fy * y / z**3)
    )
    g_t[~vis] = 0.0
    grads.positions = g_t @ Wm

    g_logs, g_q = cov_backward(g_cov3, scene)
    g_logs += g_lnamp[:, None]
    grads.log_scales = np.where(vis[:, None], g_logs, 0.0)
    grads.rotations = np.where(vis[:, None], g_q, 0.0)
    rho = scene.density
    with np.errstate(divide="ignore", invalid="ignore"):
        d_amp_d_rho = np.where(rho > 0, pj.amp / rho, 0.0)
    grads.raw_density = np.where(vis, g_amp * d_amp_d_rho * sigmoid(scene.raw_density), 0.0)
    grads.mean2d_norm = np.where(vis, np.linalg.norm(g_mean, axis=1), 0.0)
    return grads


# ---------------------------------------------------------------------------
# brute-force reference
# ---------------------------------------------------------------------------


def render_oracle(scene: SplatScene, camera, image_size=None, step: float = 0.005, margin: float = 0.5):
    """Midpoint quadrature of the untruncated mixture density along every exact pixel ray.

    ``step`` is in scene units; rays are integrated over the scene box grown
    by ``margin`` (scene units) on every side.
    """
    K, pose = camera
    if image_size is not None and tuple(image_size) != (K.width, K.height):
        raise ValueError("image size does not match intrinsics")
    if not step > 0:
        raise ValueError("step must be positive")
    tr = scene.world_transform
    dirs = camera_rays(K, pose)
    origin = tr.to_scene(pose.X_o)
    lo = scene.bbox[0] - margin
    hi = scene.bbox[1] + margin
    if len(scene):
        lo = np.minimum(lo, scene.positions.min(axis=0) - margin)
        hi = np.maximum(hi, scene.positions.max(axis=0) + margin)
    t0, t1 = ray_box_chord(origin, dirs, lo, hi)
    conic = np.linalg.inv(covariances(scene)) if len(scene) else np.zeros((0, 3, 3))
    img = mixture_line_integrals(origin, dirs, t0, t1, step, scene.positions, conic, scene.density)
    return ProjectionImage(img, K, pose)
