"""Small differentiable classifiers with hand-derived gradients.

Two architectures: a multinomial linear classifier and a one-hidden-layer tanh
MLP, both trained with softmax cross-entropy.  Besides the loss and its
parameter gradient this module exposes the mixed second derivative
``d/dx <v, grad_theta loss(x)>`` needed to optimise a canary in input space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from ._accel import USE_NUMBA
from .kernels import DEGENERATE_NORM, LINEAR, MLP1

ARCHS = {"linear": LINEAR, "mlp1": MLP1}


class DegenerateGradientError(ArithmeticError):
    """The parameter gradient vanished where its direction is needed."""


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.arch == "mlp1" and self.hidden_dim < 1:
            raise ValueError("mlp1 needs a positive hidden_dim")

    @property
    def dims(self):
        """(arch code, D, H, C) as passed to the kernels."""
        return ARCHS[self.arch], self.input_dim, self.hidden_dim, self.num_classes

    def to_dict(self):
        return {"arch": self.arch, "input_dim": self.input_dim,
                "num_classes": self.num_classes, "hidden_dim": self.hidden_dim}


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int

    def __post_init__(self):
        object.__setattr__(self, "x", np.ascontiguousarray(self.x, dtype=np.float64))
        if not np.all(np.isfinite(self.x)):
            raise ValueError("sample features must be finite")


def param_count(spec: ModelSpec) -> int:
    D, C = spec.input_dim, spec.num_classes
    if spec.arch == "linear":
        return (D + 1) * C
    H = spec.hidden_dim
    return (D + 1) * H + (H + 1) * C


def init_params(spec: ModelSpec, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Glorot-style random init; biases start at zero."""
    D, H, C = spec.input_dim, spec.hidden_dim, spec.num_classes
    if spec.arch == "linear":
        W = rng.normal(0.0, scale / np.sqrt(D + C), size=(C, D))
        return np.concatenate([W.ravel(), np.zeros(C)])
    W1 = rng.normal(0.0, scale / np.sqrt(D + H), size=(H, D))
    W2 = rng.normal(0.0, scale / np.sqrt(H + C), size=(C, H))
    return np.concatenate([W1.ravel(), np.zeros(H), W2.ravel(), np.zeros(C)])


def _check(spec, theta, x, y=None):
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.shape[0] != param_count(spec):
        raise ValueError(f"expected {param_count(spec)} parameters, got shape {theta.shape}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"expected input_dim {spec.input_dim}, got {x.shape[-1]}")
    if y is not None and not 0 <= int(y) < spec.num_classes:
        raise ValueError(f"label {y} outside [0, {spec.num_classes})")
    return theta, x


def loss(spec: ModelSpec, theta, s: Sample) -> float:
    theta, x = _check(spec, theta, s.x, s.y)
    return float(kernels.sample_loss(*spec.dims, theta, x, int(s.y)))


def param_grad(spec: ModelSpec, theta, s: Sample) -> np.ndarray:
    theta, x = _check(spec, theta, s.x, s.y)
    return kernels.sample_grad(*spec.dims, theta, x, int(s.y))


def input_grad_of_param_dot(spec: ModelSpec, theta, z: Sample, v) -> np.ndarray:
    theta, x = _check(spec, theta, z.x, z.y)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ValueError(f"direction has shape {v.shape}, expected {theta.shape}")
    return kernels.sample_mixed(*spec.dims, theta, x, int(z.y), v)


def input_grad_of_grad_norm(spec: ModelSpec, theta, z: Sample) -> np.ndarray:
    g = param_grad(spec, theta, z)
    gn = np.linalg.norm(g)
    if gn < DEGENERATE_NORM:
        raise DegenerateGradientError(f"parameter gradient norm {gn:.3e} below {DEGENERATE_NORM}")
    return input_grad_of_param_dot(spec, theta, z, g / gn)


def _batch_grads_numpy(spec, theta, X, Y):
    D, H, C = spec.input_dim, spec.hidden_dim, spec.num_classes
    n = X.shape[0]
    rows = np.arange(n)

    def softmax_residual(Z):
        P = np.exp(Z - Z.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        P[rows, Y] -= 1.0
        return P

    if spec.arch == "linear":
        W = theta[: C * D].reshape(C, D)
        R = softmax_residual(X @ W.T + theta[C * D :])
        return np.concatenate([(R[:, :, None] * X[:, None, :]).reshape(n, -1), R], axis=1)
    n1, o2 = H * D, H * D + H
    o3 = o2 + C * H
    W1 = theta[:n1].reshape(H, D)
    W2 = theta[o2:o3].reshape(C, H)
    Hid = np.tanh(X @ W1.T + theta[n1:o2])
    R = softmax_residual(Hid @ W2.T + theta[o3:])
    DA = (R @ W2) * (1.0 - Hid * Hid)
    return np.concatenate([
        (DA[:, :, None] * X[:, None, :]).reshape(n, -1),
        DA,
        (R[:, :, None] * Hid[:, None, :]).reshape(n, -1),
        R,
    ], axis=1)


def batch_param_grads(spec: ModelSpec, theta, X, Y) -> np.ndarray:
    """Per-sample parameter gradients, one row per sample."""
    theta, X = _check(spec, theta, X)
    Y = np.ascontiguousarray(Y, dtype=np.int64)
    if X.ndim != 2 or Y.shape != (X.shape[0],):
        raise ValueError("X must be (n, input_dim) and Y (n,)")
    if X.shape[0] == 0:
        return np.zeros((0, theta.shape[0]))
    if USE_NUMBA:
        return kernels.batch_grads(*spec.dims, theta, X, Y)
    return _batch_grads_numpy(spec, theta, X, Y)


def logits(spec: ModelSpec, theta, X) -> np.ndarray:
    theta, X = _check(spec, theta, X)
    X = np.atleast_2d(X)
    D, H, C = spec.input_dim, spec.hidden_dim, spec.num_classes
    if spec.arch == "linear":
        return X @ theta[: C * D].reshape(C, D).T + theta[C * D :]
    n1, o2 = H * D, H * D + H
    o3 = o2 + C * H
    Hid = np.tanh(X @ theta[:n1].reshape(H, D).T + theta[n1:o2])
    return Hid @ theta[o2:o3].reshape(C, H).T + theta[o3:]


def accuracy(spec: ModelSpec, theta, X, Y) -> float:
    if len(Y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits(spec, theta, X), axis=1) == np.asarray(Y)))
