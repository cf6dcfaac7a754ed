"""Dense float32 kernels used throughout the pipeline.

Tensors are plain C-contiguous ``numpy.float32`` arrays. Every function here
is pure: inputs are never modified.

Conventions that golden values depend on:

* ``matmul`` accumulates each output element sequentially over the inner
  dimension in float32, so it matches a naive triple loop bit for bit.
* ``resize_bilinear`` maps output pixel centres onto input pixel centres
  (``src = (dst + 0.5) * in / out - 0.5``), clamping at the borders.
* ``gaussian_smooth`` uses a kernel truncated at ``ceil(4 * sigma)``,
  renormalised to unit sum, with half-sample symmetric padding
  (``d c b a | a b c d | d c b a``).
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import ArgumentError, DimensionError

__all__ = [
    "as_tensor",
    "matmul",
    "softmax_rows",
    "minmax_normalize",
    "resize_bilinear",
    "resize_nearest",
    "gaussian_kernel1d",
    "gaussian_smooth",
    "avg_pool",
]


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


@numba.njit(cache=True)
def _matmul_seq(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed, sequential float32 summation order."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return _matmul_seq(a, b)


@numba.njit(cache=True)
def _softmax_rows_seq(x, scale):
    m, n = x.shape
    out = np.empty((m, n), dtype=np.float32)
    buf = np.empty(n, dtype=np.float64)
    for i in range(m):
        hi = -np.inf
        for j in range(n):
            v = scale * np.float64(x[i, j])
            buf[j] = v
            if v > hi:
                hi = v
        total = 0.0
        for j in range(n):
            e = np.exp(buf[j] - hi)
            buf[j] = e
            total += e
        for j in range(n):
            out[i, j] = buf[j] / total
    return out


def softmax_rows(logits: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row-wise ``softmax(scale * logits)`` with max subtraction (float64 inside)."""
    if not scale > 0:
        raise ArgumentError(f"scale must be positive, got {scale}")
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D array, got shape {x.shape}")
    return _softmax_rows_seq(np.ascontiguousarray(x), float(scale))


def minmax_normalize(m: np.ndarray) -> np.ndarray:
    """Affinely rescale to [0, 1]. A constant map becomes all zeros."""
    m = as_tensor(m)
    lo = m.min()
    hi = m.max()
    if not hi > lo:
        return np.zeros_like(m)
    out = (m - lo) / (hi - lo)
    # float32 rounding can overshoot by one ulp
    return np.clip(out, 0.0, 1.0, out=out)


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def resize_bilinear(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D map using half-pixel centres."""
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"target size must be positive, got {out_h}x{out_w}")
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D map, got shape {m.shape}")
    h, w = m.shape
    if (h, w) == (out_h, out_w):
        return as_tensor(m)
    r0, r1, rw = _bilinear_axis(h, out_h)
    c0, c1, cw = _bilinear_axis(w, out_w)
    rows = m[r0] * (1.0 - rw)[:, None] + m[r1] * rw[:, None]
    out = rows[:, c0] * (1.0 - cw)[None, :] + rows[:, c1] * cw[None, :]
    return as_tensor(out)


def resize_nearest(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize, same pixel-centre mapping as bilinear."""
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"target size must be positive, got {out_h}x{out_w}")
    m = as_tensor(m)
    h, w = m.shape
    ri = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    return np.ascontiguousarray(m[np.ix_(ri, ci)])


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps over ``[-r, r]`` with ``r = ceil(4 sigma)``."""
    if not sigma > 0:
        raise ArgumentError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(m: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = kernel.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    n = m.shape[axis]
    if r > n:
        # symmetric padding wider than the signal: build the mirrored index directly
        idx = np.arange(-r, n + r)
        period = 2 * n
        idx = np.mod(idx, period)
        idx = np.where(idx >= n, period - 1 - idx, idx)
        padded = np.take(m, idx, axis=axis)
    else:
        padded = np.pad(m, pad, mode="symmetric")
    out = np.zeros_like(m)
    for i, tap in enumerate(kernel):
        if axis == 0:
            out += tap * padded[i : i + n, :]
        else:
            out += tap * padded[:, i : i + n]
    return out


def gaussian_smooth(m: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur (rows, then columns)."""
    kernel = gaussian_kernel1d(sigma)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D map, got shape {m.shape}")
    lo, hi = m.min(), m.max()
    out = _convolve_axis(_convolve_axis(m, kernel, 0), kernel, 1)
    # taps sum to 1 only up to rounding; keep the convex-combination envelope exact
    return as_tensor(np.clip(out, lo, hi))


def avg_pool(m: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` mean pooling over the last two axes."""
    m = as_tensor(m)
    h, w = m.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"cannot pool {h}x{w} by {factor}")
    shape = m.shape[:-2] + (h // factor, factor, w // factor, factor)
    pooled = m.astype(np.float64).reshape(shape).mean(axis=(-3, -1))
    return as_tensor(pooled)
