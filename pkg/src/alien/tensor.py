"""Dense layer kernels with hand-written reverse-mode gradients.

Activations are channel-last arrays, batched as ``(B, H, W, C)``. A single
``(H, W, C)`` tensor is accepted wherever a batch is and handled as ``B = 1``.
Each layer is a ``*_forward`` returning ``(out, cache)`` and a ``*_backward``
taking ``(dout, cache)``. All kernels are dtype-generic; the network runs in
float32, gradient checks may evaluate the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .errors import OddDimensionError, ShapeMismatchError

DTYPE = np.float32


@dataclass
class ConvParams:
    kernels: np.ndarray  # (k, k, c_in, c_out)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        k = self.kernels.shape[0]
        if self.kernels.ndim != 4 or self.kernels.shape[1] != k or k % 2 == 0:
            raise ShapeMismatchError(f"kernels must be (k, k, c_in, c_out) with odd k, got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[3],):
            raise ShapeMismatchError("bias length must equal c_out")

    @property
    def k(self) -> int:
        return self.kernels.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernels.shape[2]

    @property
    def c_out(self) -> int:
        return self.kernels.shape[3]

    @property
    def size(self) -> int:
        return self.kernels.size + self.bias.size

    def astype(self, dtype) -> "ConvParams":
        return ConvParams(self.kernels.astype(dtype), self.bias.astype(dtype))


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatchError(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")
    return x, False


# ---------------------------------------------------------------- convolution


def conv2d_forward(x: np.ndarray, p: ConvParams):
    xb, single = _batched(x)
    b, h, w, c = xb.shape
    k = p.k
    if c != p.c_in:
        raise ShapeMismatchError(f"input has {c} channels, kernels expect {p.c_in}")
    if h < k or w < k:
        raise ShapeMismatchError(f"input {h}x{w} smaller than kernel {k}x{k}")
    ho, wo = h - k + 1, w - k + 1
    if k == 1:
        cols = xb.reshape(b * h * w, c)
    else:
        cols = _kernels.im2col(xb, k)
    out = cols @ p.kernels.reshape(k * k * c, p.c_out)
    out += p.bias
    out = out.reshape(b, ho, wo, p.c_out)
    return (out[0] if single else out), (cols, xb.shape, single)


def conv2d_backward(dout: np.ndarray, cache, p: ConvParams, input_grad: bool = True):
    """Gradients w.r.t. (input, kernels, bias); the input gradient is None when not requested."""
    cols, xshape, single = cache
    k = p.k
    d = dout.reshape(-1, p.c_out)
    dk = (cols.T @ d).reshape(p.kernels.shape)
    db = d.sum(axis=0)
    if not input_grad:
        return None, dk, db
    dcols = d @ p.kernels.reshape(-1, p.c_out).T
    if k == 1:
        dx = dcols.reshape(xshape)
    else:
        dx = _kernels.col2im(dcols, xshape, k)
    return (dx[0] if single else dx), dk, db


def conv2d_valid(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Valid-padding stride-1 convolution: ``(H, W, C) -> (H-k+1, W-k+1, c_out)``."""
    return conv2d_forward(x, p)[0]


# ---------------------------------------------------------------- pooling


def maxpool2_forward(x: np.ndarray):
    xb, single = _batched(x)
    if xb.shape[1] % 2 or xb.shape[2] % 2:
        raise OddDimensionError(f"max-pool needs even spatial dims, got {xb.shape[1:3]}")
    out, idx = _kernels.maxpool2_forward(xb)
    return (out[0] if single else out), (idx, single)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    idx, single = cache
    db = dout[None] if single else dout
    dx = _kernels.maxpool2_backward(db.astype(dout.dtype, copy=False), idx)
    return dx[0] if single else dx


def maxpool2(x: np.ndarray) -> np.ndarray:
    return maxpool2_forward(x)[0]


# ---------------------------------------------------------------- activations


def leaky_relu_forward(x: np.ndarray, alpha: float = 0.1):
    slope = np.where(x > 0, np.ones((), x.dtype), np.asarray(alpha, dtype=x.dtype))
    return x * slope, slope


def leaky_relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    return dout * cache


def leaky_relu(x: np.ndarray, alpha: float = 0.1) -> np.ndarray:
    return leaky_relu_forward(x, alpha)[0]


def sigmoid_forward(x: np.ndarray):
    e = np.exp(-np.abs(x))
    one = np.ones((), x.dtype)
    out = np.where(x >= 0, one / (one + e), e / (one + e))
    return out, out


def sigmoid_backward(dout: np.ndarray, cache) -> np.ndarray:
    s = cache
    return dout * s * (1 - s)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return sigmoid_forward(x)[0]


# ---------------------------------------------------------------- dropout


def dropout_forward(x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. In inference mode (or at rate 0) the input is returned as is."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded rng")
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep * scale
    return x * mask, mask


def dropout_backward(dout: np.ndarray, cache) -> np.ndarray:
    return dout if cache is None else dout * cache


def dropout(x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    return dropout_forward(x, rate, train, rng)[0]


# ---------------------------------------------------------------- checking


def grad_check(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    epsilon: float = 1e-3,
    numeric_dtype=np.float64,
    indices: np.ndarray | None = None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``fun(x)`` returns ``(scalar, dscalar/dx)`` and must be deterministic. The
    analytic gradient is taken at ``point`` in its own dtype; the finite
    differences are evaluated in ``numeric_dtype`` (pass ``None`` to keep the
    point's dtype). ``indices`` restricts the check to some flat components.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    _, analytic = fun(point)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    base = point.astype(numeric_dtype or point.dtype).reshape(-1)
    comps = np.arange(base.size) if indices is None else np.asarray(indices)
    worst = 0.0
    for i in comps:
        orig = base[i]
        base[i] = orig + epsilon
        fp, _ = fun(base.reshape(point.shape))
        base[i] = orig - epsilon
        fm, _ = fun(base.reshape(point.shape))
        base[i] = orig
        numeric = (float(fp) - float(fm)) / (2.0 * epsilon)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
