"""PSNR and SSIM (11x11 Gaussian window, sigma 1.5, valid region) with an analytic SSIM gradient."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import ShapeMismatch

__all__ = ["psnr", "ssim", "ssim_and_grad", "PSNR_INF"]

PSNR_INF = math.inf
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pixels(img):
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def _check_pair(a, b):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float) -> float:
    """``10 log10(range^2 / MSE)``; identical images give ``inf``."""
    a, b = _check_pair(a, b)
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(data_range**2 / mse)


@lru_cache(maxsize=32)
def _window_matrix(n, size=WINDOW, sigma=SIGMA):
    """``(n - size + 1, n)`` banded matrix applying the normalised 1D Gaussian in valid mode."""
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    w /= w.sum()
    m = n - size + 1
    F = np.zeros((m, n))
    for i in range(m):
        F[i, i : i + size] = w
    F.setflags(write=False)
    return F


def _filter(Fh, Fw, x):
    return Fh @ x @ Fw.T


def _stats(x, y, window):
    h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"images must be at least {window}x{window}, got {x.shape}")
    Fh, Fw = _window_matrix(h, window), _window_matrix(w, window)
    mx, my = _filter(Fh, Fw, x), _filter(Fh, Fw, y)
    pxx, pyy, pxy = _filter(Fh, Fw, x * x), _filter(Fh, Fw, y * y), _filter(Fh, Fw, x * y)
    return Fh, Fw, mx, my, pxx, pyy, pxy


def ssim(a, b, data_range: float = 1.0, window: int = WINDOW) -> float:
    """Mean local SSIM over the valid window positions."""
    return ssim_and_grad(a, b, data_range, window, need_grad=False)[0]


def ssim_and_grad(x, y, data_range: float = 1.0, window: int = WINDOW, need_grad=True):
    """Mean SSIM and its gradient with respect to ``x`` (``y`` held fixed)."""
    x, y = _check_pair(x, y)
    C1 = (K1 * data_range) ** 2
    C2 = (K2 * data_range) ** 2
    Fh, Fw, mx, my, pxx, pyy, pxy = _stats(x, y, window)
    vx = pxx - mx * mx
    vy = pyy - my * my
    cxy = pxy - mx * my
    A1 = 2 * mx * my + C1
    A2 = 2 * cxy + C2
    B1 = mx * mx + my * my + C1
    B2 = vx + vy + C2
    D = B1 * B2
    smap = A1 * A2 / D
    value = float(smap.mean())
    if not need_grad:
        return value, None
    g = 1.0 / smap.size
    d_mx = g * (2 * my * (A2 - A1) / D - 2 * mx * smap * (1.0 / B1 - 1.0 / B2))
    d_pxx = g * (-smap / B2)
    d_pxy = g * (2 * A1 / D)
    back = lambda G: Fh.T @ G @ Fw
    grad = back(d_mx) + 2 * x * back(d_pxx) + y * back(d_pxy)
    return value, grad
