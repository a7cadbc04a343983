"""Mini-batch Adam training against the masked loss, with checkpoint/resume."""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BadMagicError, DivergedError, ShapeMismatchError
from .fileio import atomic_write_bytes
from .geometry import AnchorLayout, build_layout
from .loss import LossWeights, batch_loss
from .model import ALIEN_ARCH, ArchSpec, Model, _Reader, build_alien, load_weights, save_weights
from .synth import ChipSample, augment_sample

log = logging.getLogger(__name__)

OPT_MAGIC = b"ALIENOPT"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weights: LossWeights = LossWeights()
    seed: int = 0
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 disables
    checkpoint_path: Optional[str] = None
    augment: bool = False
    lr_decay_epoch: int = 0  # epochs from this index on use learning_rate * lr_decay_factor; 0 disables
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.learning_rate, self.adam_epsilon) <= 0:
            raise ValueError("learning rate and epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")
        if self.lr_decay_epoch < 0 or self.lr_decay_factor <= 0:
            raise ValueError("lr_decay_epoch must be >= 0 and lr_decay_factor positive")

    def learning_rate_at(self, epoch: int) -> float:
        """Step schedule over 0-based epochs."""
        if self.lr_decay_epoch and epoch >= self.lr_decay_epoch:
            return self.learning_rate * self.lr_decay_factor
        return self.learning_rate


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    per_feature: np.ndarray
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)

    def format(self, feature_names: Sequence[str]) -> str:
        head = "epoch loss " + " ".join(feature_names) + " seconds"
        lines = [head]
        for r in self.records:
            feats = " ".join(f"{v:.6f}" for v in r.per_feature)
            lines.append(f"{r.epoch} {r.loss:.6f} {feats} {r.seconds:.2f}")
        return "\n".join(lines) + "\n"


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    config: TrainConfig,
    learning_rate: Optional[float] = None,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Arrays are updated in place and also returned.

    ``learning_rate`` overrides ``config.learning_rate`` (used by the schedule).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    lr = config.learning_rate if learning_rate is None else learning_rate
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatchError(f"parameter {p.shape} vs gradient {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (lr * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)).astype(p.dtype)
    return list(params), state


def _flat_arrays(model: Model) -> list[np.ndarray]:
    out = []
    for p in model.params:
        out.extend([p.kernels, p.bias])
    return out


# ---------------------------------------------------------------- checkpoints


def save_optimizer(path, state: AdamState, epoch: int) -> None:
    parts = [OPT_MAGIC, struct.pack("<III", epoch, state.step, len(state.m))]
    for m, v in zip(state.m, state.v):
        parts.append(struct.pack("<I", m.size))
        parts.append(m.astype("<f4").tobytes())
        parts.append(v.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_optimizer(path, like: Sequence[np.ndarray]) -> tuple[AdamState, int]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(OPT_MAGIC)) != OPT_MAGIC:
        raise BadMagicError("not an ALIENOPT optimizer file")
    epoch, step, n = r.u32(3)
    if n != len(like):
        raise ShapeMismatchError(f"optimizer holds {n} arrays, model has {len(like)}")
    ms, vs = [], []
    for ref in like:
        size = r.u32()
        if size != ref.size:
            raise ShapeMismatchError("optimizer array size does not match the model")
        ms.append(r.f32(size).reshape(ref.shape))
        vs.append(r.f32(size).reshape(ref.shape))
    return AdamState(ms, vs, step), epoch


def optimizer_path(weights_path) -> Path:
    return Path(str(weights_path) + ".opt")


def save_checkpoint(path, model: Model, state: AdamState, epoch: int) -> None:
    save_weights(model, path)
    save_optimizer(optimizer_path(path), state, epoch)


def load_checkpoint(path, arch: Optional[ArchSpec] = None) -> tuple[Model, AdamState, int]:
    model = load_weights(path, arch)
    state, epoch = load_optimizer(optimizer_path(path), _flat_arrays(model))
    return model, state, epoch


# ---------------------------------------------------------------- loop


def stack_samples(samples: Sequence[ChipSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([s.chip for s in samples])
    y = np.stack([s.truth.values for s in samples])
    m = np.stack([s.truth.mask for s in samples])
    return x, y, m


def _augmented(batch: Sequence[ChipSample], rng: np.random.Generator, layout: AnchorLayout):
    out = []
    for s in batch:
        k = int(rng.integers(0, 4))
        flip = bool(rng.integers(0, 2))
        out.append(augment_sample(s, k, flip, layout))
    return out


def train(
    dataset: Sequence[ChipSample],
    config: TrainConfig,
    model: Optional[Model] = None,
    arch: ArchSpec = ALIEN_ARCH,
    resume_from=None,
    layout: Optional[AnchorLayout] = None,
) -> tuple[Model, TrainHistory]:
    """Train on ``dataset`` for ``config.epochs`` epochs.

    Every epoch draws its shuffle and dropout masks from a generator seeded by
    ``(config.seed, epoch)``, so a run resumed from an epoch checkpoint
    reproduces the uninterrupted run exactly.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    layout = layout or build_layout()
    start_epoch = 0
    if resume_from is not None:
        model, state, start_epoch = load_checkpoint(resume_from, arch)
    else:
        if model is None:
            model = build_alien(config.seed, arch)
        state = AdamState.zeros_like(_flat_arrays(model))
    history = TrainHistory()
    x_all, y_all, m_all = stack_samples(dataset)
    n = len(dataset)
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng((config.seed, epoch))
        lr = config.learning_rate_at(epoch)
        order = rng.permutation(n)
        sum_loss, sum_feat, seen = 0.0, None, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if config.augment:
                batch = _augmented([dataset[i] for i in idx], rng, layout)
                xb, yb, mb = stack_samples(batch)
            else:
                xb, yb, mb = x_all[idx], y_all[idx], m_all[idx]
            xb = xb.astype(np.float32) / np.float32(255.0)
            pred = model.forward(xb, train=True, rng=rng)
            loss, per_feature, grad = batch_loss(pred, yb, mb, config.weights)
            if not np.isfinite(loss):
                raise DivergedError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = model.backward(grad.astype(np.float32))
            flat_grads = [g for pair in grads for g in pair]
            adam_step(_flat_arrays(model), flat_grads, state, config, lr)
            history.batch_losses.append(loss)
            b = len(idx)
            sum_loss += loss * b
            sum_feat = per_feature * b if sum_feat is None else sum_feat + per_feature * b
            seen += b
        rec = EpochRecord(epoch + 1, sum_loss / seen, sum_feat / seen, time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.5f (%.1fs)", rec.epoch, rec.loss, rec.seconds)
        if (
            config.checkpoint_path
            and config.checkpoint_interval
            and (epoch + 1) % config.checkpoint_interval == 0
        ):
            save_checkpoint(config.checkpoint_path, model, state, epoch + 1)
    model._tape = None
    return model, history


def train_steps(model: Model, samples: Sequence[ChipSample], steps: int, config: TrainConfig) -> list[float]:
    """Repeated updates on one fixed batch; returns the loss before each step."""
    xb, yb, mb = stack_samples(samples)
    xb = xb.astype(np.float32) / np.float32(255.0)
    state = AdamState.zeros_like(_flat_arrays(model))
    rng = np.random.default_rng(config.seed)
    losses = []
    for _ in range(steps):
        pred = model.forward(xb, train=True, rng=rng)
        loss, _, grad = batch_loss(pred, yb, mb, config.weights)
        if not np.isfinite(loss):
            raise DivergedError("non-finite loss")
        losses.append(loss)
        grads = model.backward(grad.astype(np.float32))
        adam_step(_flat_arrays(model), [g for pair in grads for g in pair], state, config)
    return losses
