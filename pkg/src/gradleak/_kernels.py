"""NumPy kernels shared by the eager ops and the graph interpreter.

Layout conventions: images/features are HxWxC, kernels are khxkwxCxD.
All functions are pure; inputs are never mutated.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((p, p), (p, p), (0, 0)))


def crop2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[p : x.shape[0] - p, p : x.shape[1] - p, :]


def corr2d(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid cross-correlation with stride 1; sums over input channels."""
    kh, kw = k.shape[0], k.shape[1]
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))  # H' x W' x C x kh x kw
    return np.tensordot(win, k, axes=([2, 3, 4], [2, 0, 1]))


def kgrad_corr(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Kernel-shaped correlation: out[a,b,c,d] = sum_ij x[a+i,b+j,c] * dy[i,j,d]."""
    oh, ow = dy.shape[0], dy.shape[1]
    win = sliding_window_view(x, (oh, ow), axis=(0, 1))  # kh x kw x C x oh x ow
    return np.tensordot(win, dy, axes=([3, 4], [0, 1]))


def rotswap(k: np.ndarray) -> np.ndarray:
    """180-degree spatial flip plus a swap of the two channel axes."""
    return np.ascontiguousarray(k[::-1, ::-1].transpose(0, 1, 3, 2))


def sslice2d(x: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return x
    return np.ascontiguousarray(x[::s, ::s, :])


def dilate2d(x: np.ndarray, s: int, h: int, w: int) -> np.ndarray:
    """Inverse of sslice2d onto an h x w canvas: zeros off the stride grid."""
    if s == 1 and x.shape[0] == h and x.shape[1] == w:
        return x
    out = np.zeros((h, w) + x.shape[2:], dtype=x.dtype)
    out[0 : (x.shape[0] - 1) * s + 1 : s, 0 : (x.shape[1] - 1) * s + 1 : s] = x
    return out


def avg_pool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (window, window), axis=(0, 1))[::stride, ::stride]
    return win.mean(axis=(3, 4))


def avg_unpool(gy: np.ndarray, window: int, stride: int, h: int, w: int) -> np.ndarray:
    """Adjoint of avg_pool: spreads each cell's value/window^2 over its window."""
    out = np.zeros((h, w) + gy.shape[2:], dtype=gy.dtype)
    g = gy / float(window * window)
    rows = (gy.shape[0] - 1) * stride
    cols = (gy.shape[1] - 1) * stride
    for a in range(window):
        for b in range(window):
            out[a : a + rows + 1 : stride, b : b + cols + 1 : stride] += g
    return out


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash, used for model-spec digests."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
