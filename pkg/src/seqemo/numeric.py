"""Numeric core: RNG, initializers, softmax/cross-entropy, Adam, gradient checking.

Tensors are plain ``numpy.ndarray`` objects. Training runs in float32; the
gradient checker expects float64 inputs.

Randomness comes exclusively from ``numpy.random.Generator`` backed by the
PCG64 bit generator, seeded explicitly. PCG64 streams are specified
bit-for-bit by numpy and are identical across platforms. Child streams are
derived with ``numpy.random.SeedSequence`` so that (master seed, path) fully
determines every draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

Tensor = np.ndarray
Rng = np.random.Generator

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64
PROB_FLOOR = 1e-12


def make_rng(seed, *path: int) -> Rng:
    """Return a PCG64 generator for ``seed`` and an optional integer sub-path.

    ``make_rng(7, 2, 0)`` is a stream independent of ``make_rng(7, 2, 1)``
    and of ``make_rng(7)``; all are reproducible everywhere.
    """
    if seed is None or int(seed) < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(p) for p in path)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed, *path: int) -> int:
    """A deterministic 63-bit child seed for ``(seed, *path)``."""
    return int(make_rng(seed, *path).integers(0, 2**63 - 1))


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        bad = np.asarray(x)[~np.isfinite(x)].ravel()[0]
        raise NumericError(f"{what} contains non-finite value {bad!r}")
    return x


# -- initialization ---------------------------------------------------------


def glorot_uniform_init(rng: Rng, fan_in: int, fan_out: int, shape, dtype=TRAIN_DTYPE) -> Tensor:
    if fan_in < 1 or fan_out < 1:
        raise ConfigError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal_init(rng: Rng, shape, dtype=TRAIN_DTYPE) -> Tensor:
    """Orthogonal matrix init; for non-square shapes rows or columns are orthonormal."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols], dtype=dtype)


# -- softmax / cross-entropy ------------------------------------------------


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = np.asarray(logits)
    if np.isnan(logits).any():
        raise NumericError("softmax input contains NaN")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _label_indices(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != num_classes:
            raise DataError(f"one-hot labels have {labels.shape[1]} columns, expected {num_classes}")
        return np.argmax(labels, axis=1)
    idx = labels.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise DataError(f"label index out of range [0, {num_classes}): {idx.min()}..{idx.max()}")
    return idx


def cross_entropy_loss(probs: Tensor, labels) -> tuple[float, Tensor]:
    """Mean negative log-likelihood of the true class.

    ``labels`` may be class indices or one-hot rows. Returns the loss and the
    gradient with respect to the *logits* that produced ``probs`` through a
    softmax, i.e. ``(probs - onehot) / batch``.
    """
    probs = np.asarray(probs)
    batch, num_classes = probs.shape
    idx = _label_indices(labels, num_classes)
    if idx.shape[0] != batch:
        raise DataError(f"{idx.shape[0]} labels for a batch of {batch}")
    p_true = np.clip(probs[np.arange(batch), idx], PROB_FLOOR, 1.0)
    loss = float(-np.mean(np.log(p_true.astype(np.float64))))
    grad = probs.copy()
    grad[np.arange(batch), idx] -= 1
    grad /= batch
    return loss, grad


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor, Tensor]:
    """Fused softmax + cross-entropy: returns (loss, probs, dloss/dlogits)."""
    probs = softmax(logits, axis=-1)
    loss, grad = cross_entropy_loss(probs, labels)
    return loss, probs, grad


# -- Adam -------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class AdamState:
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamState,
    cfg: OptimizerConfig = OptimizerConfig(),
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if not state.m:
        state = AdamState.zeros_like(params)
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if g.shape != theta.shape or m.shape != theta.shape:
            raise ShapeError(f"adam: shape mismatch for {name!r}: param {theta.shape}, grad {g.shape}, m {m.shape}")
        dtype = theta.dtype
        m = (cfg.beta1 * m + (1.0 - cfg.beta1) * g).astype(dtype, copy=False)
        v = (cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)).astype(dtype, copy=False)
        m_hat = m / dtype.type(bc1)
        v_hat = v / dtype.type(bc2)
        step = dtype.type(cfg.learning_rate) * m_hat / (np.sqrt(v_hat) + dtype.type(cfg.epsilon))
        new_params[name] = theta - step
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], lr: float = 0.01) -> dict[str, Tensor]:
    """Plain gradient descent; a test utility only."""
    return {k: p - lr * grads[k] for k, p in params.items()}


def clip_global_norm(grads: Mapping[str, Tensor], max_norm: float) -> tuple[dict[str, Tensor], float]:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


# -- finite-difference gradient check ---------------------------------------

GRAD_REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = GRAD_REL_FLOOR) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor makes vanishing gradients compare absolutely instead of
    amplifying round-off into huge relative errors.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], tuple[float, Mapping[str, Tensor]]],
    params,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(loss, grads)`` where ``grads`` mirrors
    ``params``. ``params`` is a dict of float64 arrays or a single array
    (then ``grads`` may be a bare array too). With ``max_coords`` set, each
    tensor is probed on a random subset of at most that many coordinates.
    """
    single = isinstance(params, np.ndarray)
    work = {"x": params.copy()} if single else {k: v.copy() for k, v in params.items()}
    for name, value in work.items():
        if value.dtype != np.float64:
            raise ConfigError(f"finite_diff_check needs float64 parameters; {name!r} is {value.dtype}")

    def call(p):
        loss, grads = f(p["x"] if single else p)
        loss = float(loss)
        if not np.isfinite(loss):
            raise NumericError(f"finite_diff_check: f returned non-finite value {loss}")
        if single and isinstance(grads, np.ndarray):
            grads = {"x": grads}
        return loss, grads

    _, analytic = call(work)
    analytic = {k: np.asarray(g, dtype=np.float64).copy() for k, g in analytic.items()}
    worst = 0.0
    for name, value in work.items():
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            chooser = rng if rng is not None else make_rng(0)
            coords = np.sort(chooser.choice(flat.size, size=max_coords, replace=False))
        grad_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up, _ = call(work)
            flat[i] = orig - h
            down, _ = call(work)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, float(relative_error(grad_flat[i], numeric)))
    return worst
