"""Compiled inner loops: ray quadrature on triangular grids."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _bilinear(field, hx, hy, x, y):
    nx, ny = field.shape
    fx = x / hx
    fy = y / hy
    ix = int(np.floor(fx))
    iy = int(np.floor(fy))
    if ix < 0:
        ix = 0
    elif ix > nx - 2:
        ix = nx - 2
    if iy < 0:
        iy = 0
    elif iy > ny - 2:
        iy = ny - 2
    wx = fx - ix
    wy = fy - iy
    return ((1.0 - wx) * (1.0 - wy) * field[ix, iy] + wx * (1.0 - wy) * field[ix + 1, iy]
            + (1.0 - wx) * wy * field[ix, iy + 1] + wx * wy * field[ix + 1, iy + 1])


@njit(cache=True)
def ray_integrals(field, hx, hy, x0, y0, cx, cy, sig, refine):
    """Trapezoid value of the integral of ``field`` along ``(x0, y0) + s (cx, cy)``, ``s`` in ``[0, sig]``.

    ``field`` holds node values on a uniform ``(hx, hy)`` grid and is read by
    bilinear interpolation. The sample spacing is at most ``1/refine`` cells.
    """
    n = x0.shape[0]
    out = np.empty(n)
    for p in range(n):
        s_end = sig[p]
        span = max(abs(s_end * cx) / hx, abs(s_end * cy) / hy)
        m = int(np.ceil(span * refine)) + 1
        if m < 2:
            m = 2
        ds = s_end / (m - 1)
        acc = 0.0
        for q in range(m):
            s = q * ds
            val = _bilinear(field, hx, hy, x0[p] + s * cx, y0[p] + s * cy)
            if q == 0 or q == m - 1:
                acc += 0.5 * val
            else:
                acc += val
        out[p] = acc * ds
    return out


@njit(cache=True)
def bilinear_many(field, hx, hy, xs, ys):
    out = np.empty(xs.shape[0])
    for p in range(xs.shape[0]):
        out[p] = _bilinear(field, hx, hy, xs[p], ys[p])
    return out
