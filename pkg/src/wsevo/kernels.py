"""Hot convolution and pooling kernels.

Every kernel has a numba implementation and a pure-numpy implementation with
the same signature. The active backend is picked once at import time from the
``WSEVO_BACKEND`` environment variable (``numba`` or ``numpy``); numba is the
default when it can be imported. :func:`set_backend` switches at runtime,
which the benchmark and the backend-equivalence tests use.

All arrays are NCHW. Kernels are dtype-generic (float32 in production,
float64 for finite-difference checks).
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

ENV_FLAG = "WSEVO_BACKEND"
BACKENDS = ("numba", "numpy")


# ---------------------------------------------------------------------------
# numpy path


def _windows(xp, k, stride):
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv2d_forward_np(xp, w, b, stride):
    k = w.shape[2]
    win = _windows(xp, k, stride)  # N, C, Ho, Wo, K, K
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    y += b[None, :, None, None]
    return y


def _conv2d_backward_np(xp, w, dy, stride):
    k = w.shape[2]
    n, o, ho, wo = dy.shape
    win = _windows(xp, k, stride)
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3])).astype(w.dtype, copy=False)
    db = dy.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for ki in range(k):
        for kj in range(k):
            # (N, O, Ho, Wo) x (O, C) -> (N, Ho, Wo, C)
            contrib = np.tensordot(dy, w[:, :, ki, kj], axes=([1], [0]))
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    return dxp, dw, db


def _maxpool_forward_np(x, k, stride):
    n, c = x.shape[:2]
    win = _windows(x, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx.astype(np.int64)


def _maxpool_backward_np(dy, idx, x_shape, k, stride):
    dx = np.zeros(x_shape, dtype=dy.dtype)
    ho, wo = dy.shape[2], dy.shape[3]
    for ki in range(k):
        for kj in range(k):
            hit = idx == ki * k + kj
            dx[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dy * hit
    return dx


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col(xp_n, k, stride, ho, wo, cols):
        # cols[(c, ki, kj), (i, j)] = xp_n[c, i*stride + ki, j*stride + kj]
        n_in = xp_n.shape[0]
        for c in range(n_in):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    for i in range(ho):
                        r = i * stride + ki
                        base = i * wo
                        for j in range(wo):
                            cols[row, base + j] = xp_n[c, r, j * stride + kj]

    @njit(cache=True)
    def _col2im_add(dcols, k, stride, ho, wo, dxp_n):
        n_in = dxp_n.shape[0]
        for c in range(n_in):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    for i in range(ho):
                        r = i * stride + ki
                        base = i * wo
                        for j in range(wo):
                            dxp_n[c, r, j * stride + kj] += dcols[row, base + j]

    @njit(cache=True)
    def _conv2d_forward_kernel(xp, w, b, stride, out):
        n_batch, n_in = xp.shape[0], xp.shape[1]
        n_out, k = w.shape[0], w.shape[2]
        ho, wo = out.shape[2], out.shape[3]
        wmat = w.reshape(n_out, n_in * k * k)
        cols = np.empty((n_in * k * k, ho * wo), dtype=xp.dtype)
        for n in range(n_batch):
            _im2col(xp[n], k, stride, ho, wo, cols)
            y = np.dot(wmat, cols)
            for o in range(n_out):
                bo = b[o]
                for i in range(ho):
                    for j in range(wo):
                        out[n, o, i, j] = y[o, i * wo + j] + bo

    @njit(cache=True)
    def _conv2d_backward_kernel(xp, w, dy, stride, dxp, dw, db):
        n_batch, n_in = xp.shape[0], xp.shape[1]
        n_out, k = w.shape[0], w.shape[2]
        ho, wo = dy.shape[2], dy.shape[3]
        wmat_t = np.ascontiguousarray(w.reshape(n_out, n_in * k * k).T)
        dwmat = np.zeros((n_out, n_in * k * k), dtype=w.dtype)
        cols = np.empty((n_in * k * k, ho * wo), dtype=xp.dtype)
        for n in range(n_batch):
            dy_n = np.ascontiguousarray(dy[n]).reshape(n_out, ho * wo)
            for o in range(n_out):
                db[o] += dy_n[o].sum()
            _im2col(xp[n], k, stride, ho, wo, cols)
            dwmat += np.dot(dy_n, np.ascontiguousarray(cols.T))
            _col2im_add(np.dot(wmat_t, dy_n), k, stride, ho, wo, dxp[n])
        dw[:] = dwmat.reshape(dw.shape)

    @njit(cache=True)
    def _maxpool_forward_kernel(x, k, stride, out, idx):
        n_batch, n_ch = x.shape[0], x.shape[1]
        ho, wo = out.shape[2], out.shape[3]
        for n in range(n_batch):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        best = x[n, c, i * stride, j * stride]
                        arg = 0
                        for ki in range(k):
                            for kj in range(k):
                                v = x[n, c, i * stride + ki, j * stride + kj]
                                if v > best:
                                    best = v
                                    arg = ki * k + kj
                        out[n, c, i, j] = best
                        idx[n, c, i, j] = arg

    @njit(cache=True)
    def _maxpool_backward_kernel(dy, idx, k, stride, dx):
        n_batch, n_ch = dy.shape[0], dy.shape[1]
        ho, wo = dy.shape[2], dy.shape[3]
        for n in range(n_batch):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        a = idx[n, c, i, j]
                        dx[n, c, i * stride + a // k, j * stride + a % k] += dy[n, c, i, j]


def _conv2d_forward_nb(xp, w, b, stride):
    n, _, hp, wp = xp.shape
    k = w.shape[2]
    out = np.empty((n, w.shape[0], (hp - k) // stride + 1, (wp - k) // stride + 1), dtype=xp.dtype)
    _conv2d_forward_kernel(xp, w, b, stride, out)
    return out


def _conv2d_backward_nb(xp, w, dy, stride):
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[0], dtype=w.dtype)
    _conv2d_backward_kernel(xp, w, dy, stride, dxp, dw, db)
    return dxp, dw, db


def _maxpool_forward_nb(x, k, stride):
    n, c, h, w = x.shape
    shape = (n, c, (h - k) // stride + 1, (w - k) // stride + 1)
    out = np.empty(shape, dtype=x.dtype)
    idx = np.empty(shape, dtype=np.int64)
    _maxpool_forward_kernel(x, k, stride, out, idx)
    return out, idx


def _maxpool_backward_nb(dy, idx, x_shape, k, stride):
    dx = np.zeros(x_shape, dtype=dy.dtype)
    _maxpool_backward_kernel(dy, idx, k, stride, dx)
    return dx


_IMPLS = {
    "numpy": (_conv2d_forward_np, _conv2d_backward_np, _maxpool_forward_np, _maxpool_backward_np),
}
if HAVE_NUMBA:
    _IMPLS["numba"] = (_conv2d_forward_nb, _conv2d_backward_nb, _maxpool_forward_nb, _maxpool_backward_nb)

_active = None


def set_backend(name: str) -> None:
    """Select the kernel implementation (``"numba"`` or ``"numpy"``)."""
    global _active
    name = name.lower()
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name not in _IMPLS:
        raise RuntimeError("numba backend requested but numba is not importable")
    _active = name


def get_backend() -> str:
    return _active


set_backend(os.environ.get(ENV_FLAG, "numba" if HAVE_NUMBA else "numpy"))


# ---------------------------------------------------------------------------
# public entry points


def pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, b, stride=1, padding=0):
    """Cross-correlate ``x`` (N,C,H,W) with ``w`` (O,C,K,K) and add ``b``."""
    return _IMPLS[_active][0](pad2d(x, padding), w, b, stride)


def conv2d_backward(x, w, dy, stride=1, padding=0):
    """Return ``(dx, dw, db)`` for :func:`conv2d_forward`."""
    dxp, dw, db = _IMPLS[_active][1](pad2d(x, padding), w, np.ascontiguousarray(dy), stride)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dw, db


def maxpool2d_forward(x, k=2, stride=2):
    """Return pooled output and the flat in-window argmax (first max wins)."""
    return _IMPLS[_active][2](np.ascontiguousarray(x), k, stride)


def maxpool2d_backward(dy, idx, x_shape, k=2, stride=2):
    return _IMPLS[_active][3](np.ascontiguousarray(dy), idx, tuple(x_shape), k, stride)


def avgpool2d(x, factor):
    """Non-overlapping mean pooling; trailing rows/cols that do not fill a window are dropped."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    ho, wo = h // factor, w // factor
    x = x[:, :, : ho * factor, : wo * factor]
    return x.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5), dtype=x.dtype)
