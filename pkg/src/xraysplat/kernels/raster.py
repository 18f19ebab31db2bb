"""Tile-binned additive rasterisation of 2D Gaussian splats (forward and backward).

Every splat is evaluated only inside its pixel bounding box.  Boxes are split
into 16x16 pixel tiles; the (tile, splat) instance list is sorted by tile and
then by splat index, which fixes the accumulation order of every pixel and
every gradient sum.  Both the numba and numpy paths follow that order.
"""
import math

import numpy as np

from .._accel import USE_NUMBA, njit, prange

TILE = 16


def bin_tiles(boxes, width, height, tile=TILE):
    """Instances for the splats with non-empty ``boxes`` (``x0, x1, y0, y1`` inclusive).

    Returns ``(tile_offsets, inst_splat, inst_tile)`` where instances of tile
    ``t`` are ``inst_splat[tile_offsets[t]:tile_offsets[t + 1]]``.
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    ntiles = ntx * nty
    idx = np.flatnonzero(boxes[:, 1] >= boxes[:, 0])
    b = boxes[idx]
    tx0, tx1 = b[:, 0] // tile, b[:, 1] // tile
    ty0, ty1 = b[:, 2] // tile, b[:, 3] // tile
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    splat = np.repeat(idx, counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total, dtype=np.int64) - start
    nxr = np.repeat(nx, counts)
    tx = np.repeat(tx0, counts) + local % nxr
    ty = np.repeat(ty0, counts) + local // nxr
    tile_id = ty * ntx + tx
    order = np.argsort(tile_id, kind="stable")
    inst_splat = splat[order].astype(np.int64)
    inst_tile = tile_id[order].astype(np.int64)
    offsets = np.zeros(ntiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(inst_tile, minlength=ntiles), out=offsets[1:])
    return offsets, inst_splat, inst_tile


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------


@njit(parallel=True)
def _forward_nb(offsets, inst_splat, mean, conic, amp, boxes, width, height, tile):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    img = np.zeros((height, width))
    for t in prange(ntiles):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        tx1 = min(tx0 + tile, width) - 1
        ty1 = min(ty0 + tile, height) - 1
        for i in range(offsets[t], offsets[t + 1]):
            k = inst_splat[i]
            x0 = max(boxes[k, 0], tx0)
            x1 = min(boxes[k, 1], tx1)
            y0 = max(boxes[k, 2], ty0)
            y1 = min(boxes[k, 3], ty1)
            a = conic[k, 0]
            b = conic[k, 1]
            c = conic[k, 2]
            mx = mean[k, 0]
            my = mean[k, 1]
            rho = amp[k]
            for y in range(y0, y1 + 1):
                dy = y + 0.5 - my
                for x in range(x0, x1 + 1):
                    dx = x + 0.5 - mx
                    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                    img[y, x] += rho * math.exp(-0.5 * q)
    return img


@njit(parallel=True)
def _backward_nb(offsets, inst_splat, mean, conic, amp, boxes, width, height, tile, grad_img):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    n_inst = inst_splat.shape[0]
    out = np.zeros((n_inst, 6))
    for t in prange(ntiles):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        tx1 = min(tx0 + tile, width) - 1
        ty1 = min(ty0 + tile, height) - 1
        for i in range(offsets[t], offsets[t + 1]):
            k = inst_splat[i]
            x0 = max(boxes[k, 0], tx0)
            x1 = min(boxes[k, 1], tx1)
            y0 = max(boxes[k, 2], ty0)
            y1 = min(boxes[k, 3], ty1)
            a = conic[k, 0]
            b = conic[k, 1]
            c = conic[k, 2]
            mx = mean[k, 0]
            my = mean[k, 1]
            rho = amp[k]
            g_amp = 0.0
            g_mx = 0.0
            g_my = 0.0
            g_a = 0.0
            g_b = 0.0
            g_c = 0.0
            for y in range(y0, y1 + 1):
                dy = y + 0.5 - my
                for x in range(x0, x1 + 1):
                    gi = grad_img[y, x]
                    if gi == 0.0:
                        continue
                    dx = x + 0.5 - mx
                    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                    g = math.exp(-0.5 * q)
                    gg = gi * g
                    g_amp += gg
                    w = gg * rho
                    g_mx += w * (a * dx + b * dy)
                    g_my += w * (b * dx + c * dy)
                    g_a += -0.5 * w * dx * dx
                    g_b += -w * dx * dy
                    g_c += -0.5 * w * dy * dy
            out[i, 0] = g_amp
            out[i, 1] = g_mx
            out[i, 2] = g_my
            out[i, 3] = g_a
            out[i, 4] = g_b
            out[i, 5] = g_c
    return out


@njit
def _reduce_nb(inst_splat, per_inst, m):
    out = np.zeros((m, per_inst.shape[1]))
    for i in range(inst_splat.shape[0]):
        k = inst_splat[i]
        for c in range(per_inst.shape[1]):
            out[k, c] += per_inst[i, c]
    return out


# ---------------------------------------------------------------------------
# numpy
# ---------------------------------------------------------------------------

_PAIR_CHUNK = 1 << 21


def _instance_rects(inst_splat, inst_tile, boxes, width, tile):
    ntx = (width + tile - 1) // tile
    tx0 = (inst_tile % ntx) * tile
    ty0 = (inst_tile // ntx) * tile
    b = boxes[inst_splat]
    x0 = np.maximum(b[:, 0], tx0)
    x1 = np.minimum(b[:, 1], tx0 + tile - 1)
    y0 = np.maximum(b[:, 2], ty0)
    y1 = np.minimum(b[:, 3], ty0 + tile - 1)
    return x0, x1, y0, y1


def _pairs(x0, x1, y0, y1, lo, hi):
    """Pixel pairs of instances ``lo:hi`` in row-major order within each instance."""
    nx = x1[lo:hi] - x0[lo:hi] + 1
    counts = nx * (y1[lo:hi] - y0[lo:hi] + 1)
    inst = np.repeat(np.arange(lo, hi), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(int(counts.sum()), dtype=np.int64) - start
    nxr = np.repeat(nx, counts)
    px = x0[inst] + local % nxr
    py = y0[inst] + local // nxr
    return inst, px, py


def _chunks(x0, x1, y0, y1):
    sizes = (x1 - x0 + 1) * (y1 - y0 + 1)
    csum = np.cumsum(sizes)
    n = len(sizes)
    lo = 0
    while lo < n:
        base = csum[lo - 1] if lo else 0
        hi = int(np.searchsorted(csum, base + _PAIR_CHUNK, side="right"))
        hi = max(hi, lo + 1)
        yield lo, min(hi, n)
        lo = hi


def _forward_np(offsets, inst_splat, inst_tile, mean, conic, amp, boxes, width, height, tile):
    img = np.zeros(height * width)
    x0, x1, y0, y1 = _instance_rects(inst_splat, inst_tile, boxes, width, tile)
    for lo, hi in _chunks(x0, x1, y0, y1):
        inst, px, py = _pairs(x0, x1, y0, y1, lo, hi)
        k = inst_splat[inst]
        dx = px + 0.5 - mean[k, 0]
        dy = py + 0.5 - mean[k, 1]
        q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
        img += np.bincount(py * width + px, weights=amp[k] * np.exp(-0.5 * q), minlength=height * width)
    return img.reshape(height, width)


def _backward_np(offsets, inst_splat, inst_tile, mean, conic, amp, boxes, width, height, tile, grad_img):
    n_inst = len(inst_splat)
    out = np.zeros((n_inst, 6))
    x0, x1, y0, y1 = _instance_rects(inst_splat, inst_tile, boxes, width, tile)
    for lo, hi in _chunks(x0, x1, y0, y1):
        inst, px, py = _pairs(x0, x1, y0, y1, lo, hi)
        k = inst_splat[inst]
        a, b, c = conic[k, 0], conic[k, 1], conic[k, 2]
        dx = px + 0.5 - mean[k, 0]
        dy = py + 0.5 - mean[k, 1]
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        gg = grad_img[py, px] * np.exp(-0.5 * q)
        w = gg * amp[k]
        cols = (
            gg,
            w * (a * dx + b * dy),
            w * (b * dx + c * dy),
            -0.5 * w * dx * dx,
            -w * dx * dy,
            -0.5 * w * dy * dy,
        )
        rel = inst - lo
        for j, v in enumerate(cols):
            out[lo:hi, j] += np.bincount(rel, weights=v, minlength=hi - lo)
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def rasterize(binning, mean, conic, amp, boxes, width, height, tile=TILE):
    offsets, inst_splat, inst_tile = binning
    if USE_NUMBA:
        return _forward_nb(offsets, inst_splat, mean, conic, amp, boxes, width, height, tile)
    return _forward_np(offsets, inst_splat, inst_tile, mean, conic, amp, boxes, width, height, tile)


def rasterize_backward(binning, mean, conic, amp, boxes, width, height, grad_img, tile=TILE):
    """Per-splat ``(d amp, d mean_x, d mean_y, d conic_a, d conic_b, d conic_c)``.

    ``conic = (a, b, c)`` parameterises ``q = a dx^2 + 2 b dx dy + c dy^2``.
    """
    offsets, inst_splat, inst_tile = binning
    grad_img = np.ascontiguousarray(grad_img, dtype=np.float64)
    m = len(mean)
    if USE_NUMBA:
        per_inst = _backward_nb(offsets, inst_splat, mean, conic, amp, boxes, width, height, tile, grad_img)
        return _reduce_nb(inst_splat, per_inst, m)
    per_inst = _backward_np(offsets, inst_splat, inst_tile, mean, conic, amp, boxes, width, height, tile, grad_img)
    out = np.zeros((m, 6))
    np.add.at(out, inst_splat, per_inst)
    return out
