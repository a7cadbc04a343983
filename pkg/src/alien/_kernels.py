"""Hot inner loops: patch gather/scatter for convolution and 2x2 max-pooling.

Each kernel exists twice, a numba ``@njit`` version and a pure-numpy version.
Both produce bit-identical results (same per-element summation order), so the
choice only affects speed. The numba table keeps the numpy patch gather, which
measures faster than its jit twin. Set ``ALIEN_NUMBA=0`` in the environment to force
the numpy path; it is also used automatically when numba is not importable.
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

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def _numba_requested() -> bool:
    flag = os.environ.get("ALIEN_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def im2col_numpy(x: np.ndarray, k: int) -> np.ndarray:
    b, h, w, c = x.shape
    ho, wo = h - k + 1, w - k + 1
    # (b, ho, wo, c, k, k) -> (b, ho, wo, k, k, c)
    win = sliding_window_view(x, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(b * ho * wo, k * k * c)


def col2im_numpy(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    b, h, w, c = shape
    ho, wo = h - k + 1, w - k + 1
    d = cols.reshape(b, ho, wo, k, k, c)
    out = np.zeros(shape, dtype=cols.dtype)
    # descending offsets: each output element then accumulates in the order
    # the numba path visits patches (row-major over patch positions)
    for a in reversed(range(k)):
        for bb in reversed(range(k)):
            out[:, a : a + ho, bb : bb + wo, :] += d[:, :, :, a, bb, :]
    return out


def maxpool2_forward_numpy(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, h, w, c = x.shape
    v = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    v = v.reshape(b, h // 2, w // 2, 4, c)
    idx = np.argmax(v, axis=3).astype(np.uint8)
    out = np.take_along_axis(v, idx[:, :, :, None, :].astype(np.intp), axis=3)[:, :, :, 0, :]
    return np.ascontiguousarray(out), idx


def maxpool2_backward_numpy(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    b, ho, wo, c = dout.shape
    onehot = idx[:, :, :, None, :] == np.arange(4, dtype=np.uint8)[None, None, None, :, None]
    g = np.where(onehot, dout[:, :, :, None, :], np.zeros((), dtype=dout.dtype))
    g = g.reshape(b, ho, wo, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(g.reshape(b, ho * 2, wo * 2, c))


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def _im2col_nb(x, k):
    b, h, w, c = x.shape
    ho = h - k + 1
    wo = w - k + 1
    run = k * c  # one kernel row is a contiguous run of the input
    ncol = k * run
    xf = x.reshape(-1)
    out = np.empty(b * ho * wo * ncol, dtype=x.dtype)
    o = 0
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for a in range(k):
                    src = ((n * h + i + a) * w + j) * c
                    for q in range(run):
                        out[o + q] = xf[src + q]
                    o += run
    return out.reshape(b * ho * wo, ncol)


@njit(cache=True)
def _col2im_nb(cols, b, h, w, c, k):
    ho = h - k + 1
    wo = w - k + 1
    out = np.zeros((b, h, w, c), dtype=cols.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                row = (n * ho + i) * wo + j
                q = 0
                for a in range(k):
                    for bb in range(k):
                        for ch in range(c):
                            out[n, i + a, j + bb, ch] += cols[row, q]
                            q += 1
    return out


@njit(cache=True)
def _maxpool2_forward_nb(x):
    b, h, w, c = x.shape
    ho = h // 2
    wo = w // 2
    out = np.empty((b, ho, wo, c), dtype=x.dtype)
    idx = np.empty((b, ho, wo, c), dtype=np.uint8)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = x[n, 2 * i, 2 * j, ch]
                    arg = 0
                    for q in range(1, 4):
                        v = x[n, 2 * i + q // 2, 2 * j + q % 2, ch]
                        if v > best:
                            best = v
                            arg = q
                    out[n, i, j, ch] = best
                    idx[n, i, j, ch] = arg
    return out, idx


@njit(cache=True)
def _maxpool2_backward_nb(dout, idx):
    b, ho, wo, c = dout.shape
    out = np.zeros((b, 2 * ho, 2 * wo, c), dtype=dout.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    q = idx[n, i, j, ch]
                    out[n, 2 * i + q // 2, 2 * j + q % 2, ch] = dout[n, i, j, ch]
    return out


def im2col_numba(x: np.ndarray, k: int) -> np.ndarray:
    return _im2col_nb(np.ascontiguousarray(x), k)


def col2im_numba(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    b, h, w, c = shape
    return _col2im_nb(np.ascontiguousarray(cols), b, h, w, c, k)


def maxpool2_forward_numba(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _maxpool2_forward_nb(np.ascontiguousarray(x))


def maxpool2_backward_numba(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return _maxpool2_backward_nb(np.ascontiguousarray(dout), np.ascontiguousarray(idx))


NUMPY_KERNELS = {
    "im2col": im2col_numpy,
    "col2im": col2im_numpy,
    "maxpool2_forward": maxpool2_forward_numpy,
    "maxpool2_backward": maxpool2_backward_numpy,
}

NUMBA_KERNELS = {
    # the strided numpy copy outruns the jit gather loop (see benchmarks/)
    "im2col": im2col_numpy,
    "col2im": col2im_numba,
    "maxpool2_forward": maxpool2_forward_numba,
    "maxpool2_backward": maxpool2_backward_numba,
}

_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

im2col = _active["im2col"]
col2im = _active["col2im"]
maxpool2_forward = _active["maxpool2_forward"]
maxpool2_backward = _active["maxpool2_backward"]
