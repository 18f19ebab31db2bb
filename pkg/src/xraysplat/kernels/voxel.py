"""Tile-binned voxelisation of a Gaussian mixture (forward and backward).

Same scheme as the 2D rasteriser: the grid is cut into 8^3 voxel tiles,
each kernel is evaluated inside its per-axis cutoff box (and within the
matching Mahalanobis radius), and the
(tile, kernel) instances are processed tile by tile in kernel order.
"""
import math

import numpy as np

from .._accel import USE_NUMBA, njit, prange

TILE3 = 8


def bin_tiles3(boxes, dims, tile=TILE3):
    """``boxes``: ``(M, 6)`` inclusive voxel ranges ``x0, x1, y0, y1, z0, z1``."""
    nt = [(d + tile - 1) // tile for d in dims]
    ntiles = nt[0] * nt[1] * nt[2]
    ok = (boxes[:, 1] >= boxes[:, 0]) & (boxes[:, 3] >= boxes[:, 2]) & (boxes[:, 5] >= boxes[:, 4])
    idx = np.flatnonzero(ok)
    b = boxes[idx]
    t0 = b[:, 0::2] // tile
    t1 = b[:, 1::2] // tile
    n = t1 - t0 + 1
    counts = n[:, 0] * n[:, 1] * n[:, 2]
    total = int(counts.sum())
    kern = np.repeat(idx, counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total, dtype=np.int64) - start
    nx = np.repeat(n[:, 0], counts)
    ny = np.repeat(n[:, 1], counts)
    tx = np.repeat(t0[:, 0], counts) + local % nx
    ty = np.repeat(t0[:, 1], counts) + (local // nx) % ny
    tz = np.repeat(t0[:, 2], counts) + local // (nx * ny)
    tile_id = (tz * nt[1] + ty) * nt[0] + tx
    order = np.argsort(tile_id, kind="stable")
    inst_k = kern[order].astype(np.int64)
    inst_t = tile_id[order].astype(np.int64)
    offsets = np.zeros(ntiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(inst_t, minlength=ntiles), out=offsets[1:])
    return offsets, inst_k, inst_t


@njit(parallel=True)
def _forward_nb(offsets, inst_k, pos, conic, rho, boxes, origin, spacing, nx, ny, nz, tile, qmax):
    ntx = (nx + tile - 1) // tile
    nty = (ny + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    vol = np.zeros((nx, ny, nz))
    for t in prange(ntiles):
        bx = (t % ntx) * tile
        by = ((t // ntx) % nty) * tile
        bz = (t // (ntx * nty)) * tile
        for i in range(offsets[t], offsets[t + 1]):
            k = inst_k[i]
            x0 = max(boxes[k, 0], bx)
            x1 = min(boxes[k, 1], bx + tile - 1, nx - 1)
            y0 = max(boxes[k, 2], by)
            y1 = min(boxes[k, 3], by + tile - 1, ny - 1)
            z0 = max(boxes[k, 4], bz)
            z1 = min(boxes[k, 5], bz + tile - 1, nz - 1)
            axx = conic[k, 0, 0]
            ayy = conic[k, 1, 1]
            azz = conic[k, 2, 2]
            axy = conic[k, 0, 1]
            axz = conic[k, 0, 2]
            ayz = conic[k, 1, 2]
            r = rho[k]
            for ix in range(x0, x1 + 1):
                dx = origin[0] + ix * spacing[0] - pos[k, 0]
                for iy in range(y0, y1 + 1):
                    dy = origin[1] + iy * spacing[1] - pos[k, 1]
                    qxy = axx * dx * dx + ayy * dy * dy + 2.0 * axy * dx * dy
                    lz = 2.0 * (axz * dx + ayz * dy)
                    for iz in range(z0, z1 + 1):
                        dz = origin[2] + iz * spacing[2] - pos[k, 2]
                        q = qxy + dz * (azz * dz + lz)
                        if q <= qmax:
                            vol[ix, iy, iz] += r * math.exp(-0.5 * q)
    return vol


@njit(parallel=True)
def _backward_nb(offsets, inst_k, pos, conic, rho, boxes, origin, spacing, nx, ny, nz, tile, qmax, grad):
    ntx = (nx + tile - 1) // tile
    nty = (ny + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    out = np.zeros((inst_k.shape[0], 10))
    for t in prange(ntiles):
        bx = (t % ntx) * tile
        by = ((t // ntx) % nty) * tile
        bz = (t // (ntx * nty)) * tile
        for i in range(offsets[t], offsets[t + 1]):
            k = inst_k[i]
            x0 = max(boxes[k, 0], bx)
            x1 = min(boxes[k, 1], bx + tile - 1, nx - 1)
            y0 = max(boxes[k, 2], by)
            y1 = min(boxes[k, 3], by + tile - 1, ny - 1)
            z0 = max(boxes[k, 4], bz)
            z1 = min(boxes[k, 5], bz + tile - 1, nz - 1)
            axx = conic[k, 0, 0]
            ayy = conic[k, 1, 1]
            azz = conic[k, 2, 2]
            axy = conic[k, 0, 1]
            axz = conic[k, 0, 2]
            ayz = conic[k, 1, 2]
            r = rho[k]
            g_r = 0.0
            g_px = 0.0
            g_py = 0.0
            g_pz = 0.0
            g_xx = 0.0
            g_yy = 0.0
            g_zz = 0.0
            g_xy = 0.0
            g_xz = 0.0
            g_yz = 0.0
            for ix in range(x0, x1 + 1):
                dx = origin[0] + ix * spacing[0] - pos[k, 0]
                for iy in range(y0, y1 + 1):
                    dy = origin[1] + iy * spacing[1] - pos[k, 1]
                    qxy = axx * dx * dx + ayy * dy * dy + 2.0 * axy * dx * dy
                    lz = 2.0 * (axz * dx + ayz * dy)
                    for iz in range(z0, z1 + 1):
                        gv = grad[ix, iy, iz]
                        if gv == 0.0:
                            continue
                        dz = origin[2] + iz * spacing[2] - pos[k, 2]
                        q = qxy + dz * (azz * dz + lz)
                        if q > qmax:
                            continue
                        gg = gv * math.exp(-0.5 * q)
                        w = gg * r
                        g_r += gg
                        g_px += w * (axx * dx + axy * dy + axz * dz)
                        g_py += w * (axy * dx + ayy * dy + ayz * dz)
                        g_pz += w * (axz * dx + ayz * dy + azz * dz)
                        g_xx += w * dx * dx
                        g_yy += w * dy * dy
                        g_zz += w * dz * dz
                        g_xy += w * dx * dy
                        g_xz += w * dx * dz
                        g_yz += w * dy * dz
            out[i, 0] = g_r
            out[i, 1] = g_px
            out[i, 2] = g_py
            out[i, 3] = g_pz
            out[i, 4] = -0.5 * g_xx
            out[i, 5] = -0.5 * g_yy
            out[i, 6] = -0.5 * g_zz
            out[i, 7] = -g_xy
            out[i, 8] = -g_xz
            out[i, 9] = -g_yz
    return out


@njit
def _reduce_nb(inst_k, per_inst, m):
    out = np.zeros((m, per_inst.shape[1]))
    for i in range(inst_k.shape[0]):
        k = inst_k[i]
        for c in range(per_inst.shape[1]):
            out[k, c] += per_inst[i, c]
    return out


# ---------------------------------------------------------------------------
# numpy
# ---------------------------------------------------------------------------

_PAIR_CHUNK = 1 << 20


def _rects(inst_k, inst_t, boxes, dims, tile):
    nt = [(d + tile - 1) // tile for d in dims]
    bx = (inst_t % nt[0]) * tile
    by = ((inst_t // nt[0]) % nt[1]) * tile
    bz = (inst_t // (nt[0] * nt[1])) * tile
    b = boxes[inst_k]
    lo = np.stack([np.maximum(b[:, 0], bx), np.maximum(b[:, 2], by), np.maximum(b[:, 4], bz)], axis=1)
    hi = np.stack(
        [
            np.minimum(np.minimum(b[:, 1], bx + tile - 1), dims[0] - 1),
            np.minimum(np.minimum(b[:, 3], by + tile - 1), dims[1] - 1),
            np.minimum(np.minimum(b[:, 5], bz + tile - 1), dims[2] - 1),
        ],
        axis=1,
    )
    return lo, hi


def _iter_pairs(lo, hi):
    n = hi - lo + 1
    sizes = n[:, 0] * n[:, 1] * n[:, 2]
    csum = np.cumsum(sizes)
    a = 0
    while a < len(sizes):
        base = csum[a - 1] if a else 0
        b = max(int(np.searchsorted(csum, base + _PAIR_CHUNK, side="right")), a + 1)
        b = min(b, len(sizes))
        cnt = sizes[a:b]
        inst = np.repeat(np.arange(a, b), cnt)
        start = np.repeat(np.cumsum(cnt) - cnt, cnt)
        local = np.arange(int(cnt.sum()), dtype=np.int64) - start
        # x outermost, z innermost (matches the numba loop nest)
        nz = n[inst, 2]
        ny = n[inst, 1]
        iz = lo[inst, 2] + local % nz
        iy = lo[inst, 1] + (local // nz) % ny
        ix = lo[inst, 0] + local // (nz * ny)
        yield a, b, inst, ix, iy, iz
        a = b


def _deltas(k, ix, iy, iz, pos, origin, spacing):
    dx = origin[0] + ix * spacing[0] - pos[k, 0]
    dy = origin[1] + iy * spacing[1] - pos[k, 1]
    dz = origin[2] + iz * spacing[2] - pos[k, 2]
    return dx, dy, dz


def _quad(A, dx, dy, dz):
    return (
        A[:, 0, 0] * dx * dx
        + A[:, 1, 1] * dy * dy
        + A[:, 2, 2] * dz * dz
        + 2.0 * (A[:, 0, 1] * dx * dy + A[:, 0, 2] * dx * dz + A[:, 1, 2] * dy * dz)
    )


def _forward_np(binning, pos, conic, rho, boxes, origin, spacing, dims, tile, qmax):
    _, inst_k, inst_t = binning
    vol = np.zeros(int(np.prod(dims)))
    lo, hi = _rects(inst_k, inst_t, boxes, dims, tile)
    for _, _, inst, ix, iy, iz in _iter_pairs(lo, hi):
        k = inst_k[inst]
        dx, dy, dz = _deltas(k, ix, iy, iz, pos, origin, spacing)
        q = _quad(conic[k], dx, dy, dz)
        v = np.where(q <= qmax, rho[k] * np.exp(-0.5 * q), 0.0)
        flat = (ix * dims[1] + iy) * dims[2] + iz
        vol += np.bincount(flat, weights=v, minlength=vol.size)
    return vol.reshape(dims)


def _backward_np(binning, pos, conic, rho, boxes, origin, spacing, dims, tile, qmax, grad):
    _, inst_k, inst_t = binning
    out = np.zeros((len(inst_k), 10))
    lo, hi = _rects(inst_k, inst_t, boxes, dims, tile)
    for a, b, inst, ix, iy, iz in _iter_pairs(lo, hi):
        k = inst_k[inst]
        A = conic[k]
        dx, dy, dz = _deltas(k, ix, iy, iz, pos, origin, spacing)
        q = _quad(A, dx, dy, dz)
        gg = np.where(q <= qmax, grad[ix, iy, iz] * np.exp(-0.5 * q), 0.0)
        w = gg * rho[k]
        cols = (
            gg,
            w * (A[:, 0, 0] * dx + A[:, 0, 1] * dy + A[:, 0, 2] * dz),
            w * (A[:, 1, 0] * dx + A[:, 1, 1] * dy + A[:, 1, 2] * dz),
            w * (A[:, 2, 0] * dx + A[:, 2, 1] * dy + A[:, 2, 2] * dz),
            -0.5 * w * dx * dx,
            -0.5 * w * dy * dy,
            -0.5 * w * dz * dz,
            -w * dx * dy,
            -w * dx * dz,
            -w * dy * dz,
        )
        rel = inst - a
        for j, v in enumerate(cols):
            out[a:b, j] += np.bincount(rel, weights=v, minlength=b - a)
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def voxel_boxes(pos, cov, origin, spacing, dims, cutoff):
    """Inclusive voxel-index boxes covering ``cutoff`` standard deviations per axis."""
    r = cutoff * np.sqrt(np.diagonal(cov, axis1=1, axis2=2))
    lo = np.ceil((pos - r - origin) / spacing)
    hi = np.floor((pos + r - origin) / spacing)
    d = np.asarray(dims)
    lo = np.clip(lo, 0, d).astype(np.int64)
    hi = np.clip(hi, -1, d - 1).astype(np.int64)
    return np.stack([lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1], lo[:, 2], hi[:, 2]], axis=1)


def voxelize_forward(binning, pos, conic, rho, boxes, origin, spacing, dims, cutoff, tile=TILE3):
    """Mixture density at voxel centers; each kernel is cut at Mahalanobis radius ``cutoff``."""
    qmax = float(cutoff) ** 2
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    if USE_NUMBA:
        return _forward_nb(binning[0], binning[1], pos, conic, rho, boxes, origin, spacing, *dims, tile, qmax)
    return _forward_np(binning, pos, conic, rho, boxes, origin, spacing, dims, tile, qmax)


def voxelize_backward(binning, pos, conic, rho, boxes, origin, spacing, dims, cutoff, grad, tile=TILE3):
    """Per-kernel ``(d rho, d pos (3), d conic: xx, yy, zz, xy, xz, yz)``.

    Off-diagonal conic entries are single parameters entering the quadratic
    form twice.
    """
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    qmax = float(cutoff) ** 2
    m = len(pos)
    if USE_NUMBA:
        per = _backward_nb(binning[0], binning[1], pos, conic, rho, boxes, origin, spacing, *dims, tile, qmax, grad)
        return _reduce_nb(binning[1], per, m)
    per = _backward_np(binning, pos, conic, rho, boxes, origin, spacing, dims, tile, qmax, grad)
    out = np.zeros((m, 10))
    np.add.at(out, binning[1], per)
    return out
