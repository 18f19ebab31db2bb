"""Ray-marching kernels: voxel DRR integration and the Gaussian-mixture line-integral oracle.

Both integrators split each ray's chord through a box into ``N = ceil(L / step)``
equal segments and sum midpoint samples, so constant fields integrate exactly.
"""
import math

import numpy as np

from .._accel import USE_NUMBA, njit, prange

# Q > 80 means exp(-Q/2) < 4e-18: below double precision relative to the kernel peak.
ORACLE_Q_SKIP = 80.0


def ray_box_chord(origins, dirs, lo, hi):
    """Vectorised slab test.  Returns ``(t0, t1)``; empty chords have ``t1 <= t0``."""
    o = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    tmin = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    tmax = np.where(np.isnan(ta), np.inf, np.maximum(ta, tb))
    # zero direction component: inside slab -> unbounded, outside -> empty
    zero = dirs == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    t0 = np.maximum(tmin.max(axis=-1), 0.0)
    t1 = tmax.min(axis=-1)
    return t0, t1


# ---------------------------------------------------------------------------
# trilinear sampling
# ---------------------------------------------------------------------------


@njit
def _lerp(a, b, t):
    # exact when a == b, so constant regions interpolate to themselves
    return a + t * (b - a)


@njit
def _trilinear_nb(values, fx, fy, fz):
    nx, ny, nz = values.shape
    if fx < -0.5 or fy < -0.5 or fz < -0.5 or fx >= nx - 0.5 or fy >= ny - 0.5 or fz >= nz - 0.5:
        return 0.0
    fx = min(max(fx, 0.0), nx - 1.0)
    fy = min(max(fy, 0.0), ny - 1.0)
    fz = min(max(fz, 0.0), nz - 1.0)
    i0 = min(int(fx), max(nx - 2, 0))
    j0 = min(int(fy), max(ny - 2, 0))
    k0 = min(int(fz), max(nz - 2, 0))
    i1 = min(i0 + 1, nx - 1)
    j1 = min(j0 + 1, ny - 1)
    k1 = min(k0 + 1, nz - 1)
    tx = fx - i0
    ty = fy - j0
    tz = fz - k0
    c00 = _lerp(values[i0, j0, k0], values[i1, j0, k0], tx)
    c10 = _lerp(values[i0, j1, k0], values[i1, j1, k0], tx)
    c01 = _lerp(values[i0, j0, k1], values[i1, j0, k1], tx)
    c11 = _lerp(values[i0, j1, k1], values[i1, j1, k1], tx)
    return _lerp(_lerp(c00, c10, ty), _lerp(c01, c11, ty), tz)


def _lerp_np(a, b, t):
    return a + t * (b - a)


def trilinear_np(values, f):
    """Trilinear lookup at fractional voxel indices ``f`` (``(..., 3)``); 0 outside the cells."""
    n = np.array(values.shape)
    f = np.asarray(f, dtype=float)
    inside = np.all((f >= -0.5) & (f < n - 0.5), axis=-1)
    fc = np.clip(f, 0.0, n - 1.0)
    i0 = np.minimum(fc.astype(np.int64), np.maximum(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    t = fc - i0
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    a0, b0, c0 = i0[..., 0], i0[..., 1], i0[..., 2]
    a1, b1, c1 = i1[..., 0], i1[..., 1], i1[..., 2]
    v = values
    c00 = _lerp_np(v[a0, b0, c0], v[a1, b0, c0], tx)
    c10 = _lerp_np(v[a0, b1, c0], v[a1, b1, c0], tx)
    c01 = _lerp_np(v[a0, b0, c1], v[a1, b0, c1], tx)
    c11 = _lerp_np(v[a0, b1, c1], v[a1, b1, c1], tx)
    out = _lerp_np(_lerp_np(c00, c10, ty), _lerp_np(c01, c11, ty), tz)
    return np.where(inside, out, 0.0)


# ---------------------------------------------------------------------------
# DRR
# ---------------------------------------------------------------------------


@njit(parallel=True)
def _drr_nb(values, origin, spacing, ray_o, dirs, t0, t1, threshold, step):
    h, w = t0.shape
    out = np.zeros((h, w))
    for r in prange(h):
        for c in range(w):
            L = t1[r, c] - t0[r, c]
            if L <= 0.0:
                continue
            n = int(math.ceil(L / step))
            hs = L / n
            acc = 0.0
            for k in range(n):
                t = t0[r, c] + (k + 0.5) * hs
                fx = (ray_o[0] + t * dirs[r, c, 0] - origin[0]) / spacing[0]
                fy = (ray_o[1] + t * dirs[r, c, 1] - origin[1]) / spacing[1]
                fz = (ray_o[2] + t * dirs[r, c, 2] - origin[2]) / spacing[2]
                a = _trilinear_nb(values, fx, fy, fz)
                if a > threshold:
                    acc += a * hs
            out[r, c] = acc
    return out


def _drr_np(values, origin, spacing, ray_o, dirs, t0, t1, threshold, step):
    L = np.maximum(t1 - t0, 0.0)
    n = np.where(L > 0, np.ceil(L / step), 0).astype(np.int64)
    hs = np.where(n > 0, L / np.maximum(n, 1), 0.0)
    out = np.zeros(t0.shape)
    for k in range(int(n.max(initial=0))):
        active = k < n
        t = t0 + (k + 0.5) * hs
        pts = ray_o + t[..., None] * dirs
        a = trilinear_np(values, (pts - origin) / spacing)
        out += np.where(active & (a > threshold), a * hs, 0.0)
    return out


def drr_integrate(values, origin, spacing, ray_o, dirs, t0, t1, threshold, step):
    args = (
        np.ascontiguousarray(values, dtype=np.float64),
        np.asarray(origin, dtype=np.float64),
        np.asarray(spacing, dtype=np.float64),
        np.asarray(ray_o, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(t0, dtype=np.float64),
        np.ascontiguousarray(t1, dtype=np.float64),
        float(threshold),
        float(step),
    )
    return _drr_nb(*args) if USE_NUMBA else _drr_np(*args)


# ---------------------------------------------------------------------------
# Gaussian-mixture line integrals (reference for the splatting projector)
# ---------------------------------------------------------------------------


@njit(parallel=True)
def _mixture_line_nb(ray_o, dirs, t0, t1, step, pos, conic, rho):
    h, w = t0.shape
    m = pos.shape[0]
    out = np.zeros((h, w))
    for r in prange(h):
        for c in range(w):
            L = t1[r, c] - t0[r, c]
            if L <= 0.0:
                continue
            n = int(math.ceil(L / step))
            hs = L / n
            dx = dirs[r, c, 0]
            dy = dirs[r, c, 1]
            dz = dirs[r, c, 2]
            acc = 0.0
            for j in range(m):
                # Q(t) = a t^2 + 2 b t + c0 along the ray
                ox = ray_o[0] - pos[j, 0]
                oy = ray_o[1] - pos[j, 1]
                oz = ray_o[2] - pos[j, 2]
                A = conic[j]
                Ad0 = A[0, 0] * dx + A[0, 1] * dy + A[0, 2] * dz
                Ad1 = A[1, 0] * dx + A[1, 1] * dy + A[1, 2] * dz
                Ad2 = A[2, 0] * dx + A[2, 1] * dy + A[2, 2] * dz
                a = dx * Ad0 + dy * Ad1 + dz * Ad2
                b = ox * Ad0 + oy * Ad1 + oz * Ad2
                c0 = (
                    ox * (A[0, 0] * ox + A[0, 1] * oy + A[0, 2] * oz)
                    + oy * (A[1, 0] * ox + A[1, 1] * oy + A[1, 2] * oz)
                    + oz * (A[2, 0] * ox + A[2, 1] * oy + A[2, 2] * oz)
                )
                if c0 - b * b / a > ORACLE_Q_SKIP:
                    continue
                s = 0.0
                for k in range(n):
                    t = t0[r, c] + (k + 0.5) * hs
                    q = a * t * t + 2.0 * b * t + c0
                    s += math.exp(-0.5 * q)
                acc += rho[j] * s * hs
            out[r, c] = acc
    return out


def _mixture_line_np(ray_o, dirs, t0, t1, step, pos, conic, rho):
    shape = t0.shape
    d = dirs.reshape(-1, 3)
    t0f, t1f = t0.ravel(), t1.ravel()
    L = np.maximum(t1f - t0f, 0.0)
    n = np.where(L > 0, np.ceil(L / step), 0).astype(np.int64)
    hs = np.where(n > 0, L / np.maximum(n, 1), 0.0)
    o = ray_o[None, :] - pos  # (m, 3)
    Ad = np.einsum("jkl,rl->rjk", conic, d)  # (r, m, 3)
    a = np.einsum("rk,rjk->rj", d, Ad)
    b = np.einsum("jk,rjk->rj", o, Ad)
    c0 = np.einsum("jk,jkl,jl->j", o, conic, o)[None, :]
    keep = (c0 - b * b / a) <= ORACLE_Q_SKIP
    s = np.zeros_like(a)
    for k in range(int(n.max(initial=0))):
        t = (t0f + (k + 0.5) * hs)[:, None]
        q = a * t * t + 2.0 * b * t + c0
        s += np.where((k < n)[:, None] & keep, np.exp(-0.5 * q), 0.0)
    out = np.where(keep, rho[None, :] * s * hs[:, None], 0.0).sum(axis=1)
    return out.reshape(shape)


def mixture_line_integrals(ray_o, dirs, t0, t1, step, pos, conic, rho):
    args = (
        np.asarray(ray_o, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(t0, dtype=np.float64),
        np.ascontiguousarray(t1, dtype=np.float64),
        float(step),
        np.ascontiguousarray(pos, dtype=np.float64),
        np.ascontiguousarray(conic, dtype=np.float64),
        np.ascontiguousarray(rho, dtype=np.float64),
    )
    if len(args[5]) == 0:
        return np.zeros(t0.shape)
    return _mixture_line_nb(*args) if USE_NUMBA else _mixture_line_np(*args)
