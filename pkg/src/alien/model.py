"""The ALIEN layer stack: construction, chip forward/backward, weight files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .fileio import atomic_write_bytes
from .errors import BadMagicError, NoForwardStateError, ShapeMismatchError, TruncatedFileError

LEAKY_ALPHA = 0.1
DROPOUT_RATE = 0.1
MAGIC = b"ALIEN001"


@dataclass(frozen=True)
class Layer:
    kind: str  # "conv" | "pool" | "dropout" | "sigmoid"
    k: int = 0
    channels: int = 0
    rate: float = 0.0
    activation: bool = True  # leaky ReLU after a conv

    def label(self) -> str:
        if self.kind == "conv":
            return f"Convolution 2D {self.k}x{self.k} x{self.channels}"
        if self.kind == "pool":
            return "MaxPool 2D"
        if self.kind == "dropout":
            return f"Dropout ({self.rate:.0%})"
        return "Sigmoid"


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    name: str = "custom"

    @property
    def convs(self) -> list[Layer]:
        return [l for l in self.layers if l.kind == "conv"]

    def trace(self, input_shape: Optional[tuple[int, int, int]] = None) -> list[tuple[int, int, int]]:
        """Output shape after every layer, propagated without running any kernels."""
        h, w, c = input_shape or self.input_shape
        shapes = []
        for l in self.layers:
            if l.kind == "conv":
                h, w, c = h - l.k + 1, w - l.k + 1, l.channels
                if h < 1 or w < 1:
                    raise ShapeMismatchError(f"{l.label()} leaves no output")
            elif l.kind == "pool":
                if h % 2 or w % 2:
                    raise ShapeMismatchError(f"max-pool on odd size {h}x{w}")
                h, w = h // 2, w // 2
            shapes.append((h, w, c))
        return shapes

    def param_shapes(self) -> list[tuple[int, int, int]]:
        """(k, c_in, c_out) for every convolution."""
        c = self.input_shape[2]
        out = []
        for l in self.convs:
            out.append((l.k, c, l.channels))
            c = l.channels
        return out

    def param_count(self) -> int:
        return sum(k * k * ci * co + co for k, ci, co in self.param_shapes())


def _conv(k, ch, act=True):
    return Layer("conv", k=k, channels=ch, activation=act)


def alien_arch(width: float = 1.0, n_outputs: int = 45) -> ArchSpec:
    """Detector stack for 80x80x3 chips; ``width`` scales every hidden channel count."""

    def ch(n):
        return max(1, int(round(n * width)))

    pool, drop = Layer("pool"), Layer("dropout", rate=DROPOUT_RATE)
    layers = (
        _conv(3, ch(16)), _conv(3, ch(16)), pool,
        _conv(5, ch(16)), _conv(3, ch(16)), _conv(5, ch(16)), pool,
        _conv(3, ch(32)), _conv(5, ch(32)), pool,
        _conv(3, ch(32)), pool,
        _conv(1, ch(256)), drop,
        _conv(1, ch(256)), drop,
        _conv(1, ch(256)), drop,
        _conv(1, ch(256)), _conv(1, ch(256)),
        _conv(1, n_outputs, act=False),
        Layer("sigmoid"),
    )  # fmt: skip
    name = "alien" if width == 1.0 else f"alien-w{width:g}"
    return ArchSpec(layers, (80, 80, 3), name)


def reduced_arch(channels: int = 8, n_outputs: int = 45) -> ArchSpec:
    """Small stack over 16x16 chips using every layer kind of the detector stack (for gradient checks)."""
    pool, drop = Layer("pool"), Layer("dropout", rate=DROPOUT_RATE)
    layers = (
        _conv(3, channels), _conv(3, channels), pool,
        _conv(3, channels), pool,
        _conv(1, 2 * channels), drop,
        _conv(1, 2 * channels), pool,
        _conv(1, 2 * channels),
        _conv(1, n_outputs, act=False),
        Layer("sigmoid"),
    )  # fmt: skip
    return ArchSpec(layers, (16, 16, 3), f"reduced-c{channels}")


ALIEN_ARCH = alien_arch()

# Output shape after each of the 22 layers.
ALIEN_SHAPES = [
    (78, 78, 16), (76, 76, 16), (38, 38, 16),
    (34, 34, 16), (32, 32, 16), (28, 28, 16), (14, 14, 16),
    (12, 12, 32), (8, 8, 32), (4, 4, 32),
    (2, 2, 32), (1, 1, 32),
    (1, 1, 256), (1, 1, 256), (1, 1, 256), (1, 1, 256), (1, 1, 256), (1, 1, 256),
    (1, 1, 256), (1, 1, 256), (1, 1, 45), (1, 1, 45),
]  # fmt: skip


class Model:
    """Parameters of an ALIEN stack plus the tape of the last train-mode pass.

    Safe to share between threads for inference; training mutates ``params``.
    """

    def __init__(self, arch: ArchSpec, params: Sequence[T.ConvParams], seed: int = 0):
        shapes = arch.param_shapes()
        if len(params) != len(shapes):
            raise ShapeMismatchError(f"{len(params)} parameter sets for {len(shapes)} convolutions")
        for p, (k, ci, co) in zip(params, shapes):
            if p.kernels.shape != (k, k, ci, co):
                raise ShapeMismatchError(f"kernel shape {p.kernels.shape} != {(k, k, ci, co)}")
        self.arch = arch
        self.params = list(params)
        self.rng = np.random.default_rng(seed)
        self._tape: Optional[list] = None

    @property
    def dtype(self):
        return self.params[0].kernels.dtype

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Model":
        m = Model(self.arch, [T.ConvParams(p.kernels.copy(), p.bias.copy()) for p in self.params])
        m.rng = np.random.default_rng()
        m.rng.bit_generator.state = self.rng.bit_generator.state
        return m

    def astype(self, dtype) -> "Model":
        return Model(self.arch, [p.astype(dtype) for p in self.params])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([p.kernels.ravel(), p.bias]) for p in self.params])

    def set_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        new = []
        for p in self.params:
            nk = p.kernels.size
            k = flat[i : i + nk].reshape(p.kernels.shape)
            b = flat[i + nk : i + nk + p.bias.size]
            i += nk + p.bias.size
            new.append(T.ConvParams(np.array(k, dtype=flat.dtype), np.array(b, dtype=flat.dtype)))
        self.params = new

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Batch forward pass ``(B, H, W, 3) -> (B, n_outputs)``.

        Train mode applies dropout (with ``rng`` or the model's own generator)
        and records the tape used by :meth:`backward`.
        """
        if x.ndim != 4 or x.shape[1:] != self.arch.input_shape:
            raise ShapeMismatchError(f"expected (B, {self.arch.input_shape}), got {x.shape}")
        rng = rng if rng is not None else self.rng
        h = x.astype(self.dtype, copy=False)
        tape = []
        pi = 0
        for layer in self.arch.layers:
            if layer.kind == "conv":
                p = self.params[pi]
                h, conv_cache = T.conv2d_forward(h, p)
                act_cache = None
                if layer.activation:
                    h, act_cache = T.leaky_relu_forward(h, LEAKY_ALPHA)
                tape.append((conv_cache, act_cache))
                pi += 1
            elif layer.kind == "pool":
                h, cache = T.maxpool2_forward(h)
                tape.append(cache)
            elif layer.kind == "dropout":
                h, cache = T.dropout_forward(h, layer.rate, train, rng)
                tape.append(cache)
            elif layer.kind == "sigmoid":
                h, cache = T.sigmoid_forward(h)
                tape.append(cache)
        self._tape = tape if train else None
        return h.reshape(h.shape[0], -1)

    def backward(self, dout: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Parameter gradients ``[(dkernels, dbias), ...]`` summed over the batch."""
        if self._tape is None:
            raise NoForwardStateError("backward needs a preceding train-mode forward pass")
        tape = self._tape
        shape = self.arch.trace()[-1]
        d = dout.astype(self.dtype, copy=False).reshape((dout.shape[0],) + shape)
        grads: list = [None] * len(self.params)
        pi = len(self.params)
        for layer, cache in zip(reversed(self.arch.layers), reversed(tape)):
            if layer.kind == "conv":
                pi -= 1
                conv_cache, act_cache = cache
                if act_cache is not None:
                    d = T.leaky_relu_backward(d, act_cache)
                d, dk, db = T.conv2d_backward(d, conv_cache, self.params[pi], input_grad=pi > 0)
                grads[pi] = (dk, db)
            elif layer.kind == "pool":
                d = T.maxpool2_backward(d, cache)
            elif layer.kind == "dropout":
                d = T.dropout_backward(d, cache)
            elif layer.kind == "sigmoid":
                d = T.sigmoid_backward(d, cache)
        return grads


def build_alien(seed: int = 0, arch: ArchSpec = ALIEN_ARCH) -> Model:
    """He-normal kernels (variance 2 / (k*k*c_in)), zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = []
    for k, ci, co in arch.param_shapes():
        std = np.sqrt(2.0 / (k * k * ci))
        w = (rng.standard_normal((k, k, ci, co)) * std).astype(T.DTYPE)
        params.append(T.ConvParams(w, np.zeros(co, dtype=T.DTYPE)))
    return Model(arch, params, seed)


def normalize_chip(chip: np.ndarray) -> np.ndarray:
    """uint8 raster -> float32 in [0, 1]."""
    if chip.dtype == np.uint8:
        return chip.astype(T.DTYPE) / T.DTYPE(255.0)
    return chip.astype(T.DTYPE, copy=False)


def forward_chip(model: Model, chip: np.ndarray, mode: str = "infer") -> np.ndarray:
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    if chip.shape != model.arch.input_shape:
        raise ShapeMismatchError(f"chip must be {model.arch.input_shape}, got {chip.shape}")
    return model.forward(normalize_chip(chip)[None], train=mode == "train")[0]


def backward_chip(model: Model, output_gradient: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    return model.backward(np.asarray(output_gradient)[None])


# ---------------------------------------------------------------- weight files


def weights_bytes(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(model.params))]
    for p in model.params:
        parts.append(struct.pack("<III", p.k, p.c_in, p.c_out))
        parts.append(p.kernels.astype("<f4").tobytes())
        parts.append(p.bias.astype("<f4").tobytes())
    return b"".join(parts)


def save_weights(model: Model, path) -> None:
    atomic_write_bytes(path, weights_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def _guess_arch(shapes: list[tuple[int, int, int]]) -> ArchSpec:
    candidates = [ALIEN_ARCH]
    if shapes:
        first_out = shapes[0][2]
        candidates.append(alien_arch(first_out / 16))
        candidates.append(reduced_arch(first_out))
    for arch in candidates:
        if arch.param_shapes() == shapes:
            return arch
    raise ShapeMismatchError(f"no known architecture has convolution shapes {shapes}")


def parse_weights(data: bytes, arch: Optional[ArchSpec] = None) -> Model:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError("not an ALIEN001 weights file")
    n = r.u32()
    shapes, params = [], []
    for _ in range(n):
        k, ci, co = r.u32(3)
        kernels = r.f32(k * k * ci * co).reshape(k, k, ci, co)
        bias = r.f32(co)
        shapes.append((k, ci, co))
        params.append(T.ConvParams(kernels, bias))
    if r.pos != len(data):
        raise ShapeMismatchError(f"{len(data) - r.pos} trailing bytes after {n} layers")
    if arch is None:
        arch = _guess_arch(shapes)
    elif arch.param_shapes() != shapes:
        raise ShapeMismatchError(f"file layers {shapes} do not match {arch.name}")
    return Model(arch, params)


def load_weights(path, arch: Optional[ArchSpec] = None) -> Model:
    with open(path, "rb") as fh:
        return parse_weights(fh.read(), arch)
