"""Compiled inner loops for the sequential scan and its reverse pass.

Each element update is a separate multiply then add, with no fused
multiply-add, so results match the numpy loop bit for bit.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _forward(a, b, out):
    M, L, K = a.shape
    for m in range(M):
        for k in range(K):
            out[m, 0, k] = a[m, 0, k] * 0.0 + b[m, 0, k]
        for t in range(1, L):
            for k in range(K):
                out[m, t, k] = a[m, t, k] * out[m, t - 1, k] + b[m, t, k]


@njit(cache=True, nogil=True)
def _backward(a, H, g, c, gh, ga):
    # gh_t = a_{t+1} * gh_{t+1} + g_t c_t ;  ga_t = gh_t * H_{t-1}
    M, L, D, N = a.shape
    for m in range(M):
        for d in range(D):
            for n in range(N):
                gh[m, L - 1, d, n] = g[m, L - 1, d] * c[m, L - 1, n]
        for t in range(L - 2, -1, -1):
            for d in range(D):
                gd = g[m, t, d]
                for n in range(N):
                    gh[m, t, d, n] = a[m, t + 1, d, n] * gh[m, t + 1, d, n] + gd * c[m, t, n]
        for d in range(D):
            for n in range(N):
                ga[m, 0, d, n] = 0.0
        for t in range(1, L):
            for d in range(D):
                for n in range(N):
                    ga[m, t, d, n] = gh[m, t, d, n] * H[m, t - 1, d, n]


def sequential_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All states of ``h_l = a_l h_{l-1} + b_l`` for (M, L, ...) arrays, one pass."""
    shape = b.shape
    M, L = shape[:2]
    a3 = np.ascontiguousarray(a).reshape(M, L, -1)
    b3 = np.ascontiguousarray(b).reshape(M, L, -1)
    out = np.empty(b3.shape, dtype=b.dtype)
    _forward(a3, b3, out)
    return out.reshape(shape)


def sequential_scan_backward(a: np.ndarray, H: np.ndarray, g: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of the states and of ``a`` for the readout ``y_l = H_l c_l``, given ``g = dy``."""
    a, H, g, c = (np.ascontiguousarray(v) for v in (a, H, g, c))
    gh = np.empty(a.shape, dtype=H.dtype)
    ga = np.empty(a.shape, dtype=H.dtype)
    _backward(a, H, g, c, gh, ga)
    return gh, ga
