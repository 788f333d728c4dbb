"""Dense float64 primitives with explicit backward passes, a parameter store and Adam.

Every forward op here is paired with a ``*_backward`` that takes the upstream
gradient and returns gradients for the op's inputs. The model graph is fixed,
so layers compose these by hand instead of recording a tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_CLAMP = 1e-7


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class OptimizerStateError(RuntimeError):
    pass


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise DimensionError(
            f"affine: x{x.shape} @ W{W.shape} + b{b.shape} do not conform")
    return x @ W + b


def affine_backward(dout, x, W):
    """Returns (dx, dW, db)."""
    return dout @ W.T, x.T @ dout, dout.sum(axis=0, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    # subgradient at exactly 0 is 0
    return dout * (x > 0.0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(dout, s):
    """Gradient through softmax given its output ``s``."""
    return s * (dout - (dout * s).sum(axis=1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout, s):
    return dout * s * (1.0 - s)


def _check_labels(y):
    if y.size == 0:
        raise EmptyBatchError("empty batch")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise LabelError("labels must be 0 or 1")


def bce_mean(p: np.ndarray, y: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    if p.shape != y.shape:
        raise DimensionError(f"bce_mean: p{p.shape} vs y{y.shape}")
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def bce_with_logits(logit: np.ndarray, y: np.ndarray):
    """bce_mean(sigmoid(logit), y) and its gradient w.r.t. ``logit``.

    The gradient is that of the clamped loss: zero where the clamp is active.
    """
    _check_labels(y)
    if logit.shape != y.shape:
        raise DimensionError(f"bce: logit{logit.shape} vs y{y.shape}")
    p = sigmoid(logit)
    loss = bce_mean(p, y)
    n = y.shape[0]
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    dlogit = np.where(inside, (p - y) / n, 0.0)
    return loss, dlogit


def frob_sq(M: np.ndarray) -> float:
    return float(np.sum(np.square(M)))


def concat_cols(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row mismatch {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_cols_backward(dout, left_width: int):
    return dout[:, :left_width], dout[:, left_width:]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def assert_finite(named: dict[str, np.ndarray]) -> None:
    for name, arr in named.items():
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in '{name}'")


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.name:
            raise ValueError("parameter name must be non-empty")
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


class ParamStore:
    """Ordered name -> Param mapping; insertion order is the checkpoint order."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter name '{name}'")
        p = Param(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def values(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            p = self._params[name]
            if p.value.shape != np.shape(arr):
                raise DimensionError(
                    f"'{name}': stored shape {np.shape(arr)} != model shape {p.value.shape}")
            p.value[...] = arr

    def size(self) -> int:
        return sum(p.value.size for p in self._params.values())


class Adam:
    """Bias-corrected adaptive-moment optimizer over a ParamStore."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: ParamStore, skip: frozenset = frozenset()) -> None:
        """Update every param not in ``skip`` and zero all grads."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in store:
            if p.name in skip:
                continue
            g = p.grad
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            m, v = self.m[p.name], self.v[p.name]
            if m.shape != p.value.shape:
                raise OptimizerStateError(
                    f"'{p.name}' changed shape {m.shape} -> {p.value.shape} between steps")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
        store.zero_grad()
