"""Canary crafting: find an input whose parameter gradient is orthogonal to
held-out client updates while keeping its norm at least a given constant.

The design loss over a set of mock updates ``u_i`` with canary gradient ``g``:

* covariance: ``mean_i <u_i, g>^2 + max(c - |g|, 0)^2``
* mean_dot:   ``<mean_i u_i, g>^2 + max(c - |g|, 0)^2``
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .data import ClientDataset, SampleBatch
from .fl import DpConfig, LocalTrainConfig, client_updates, local_update
from .models import DegenerateGradientError, ModelSpec, Sample

VARIANTS = {"covariance": kernels.COVARIANCE, "mean_dot": kernels.MEAN_DOT}
INIT_STRATEGIES = ("random", "pool_sample")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class DesignConfig:
    pool_size: int = 512
    samples_per_mock: int = 1
    mock_clients_per_batch: int = 0  # 0: every mock client at every iteration
    design_iters: int = 2500
    canary_lr: float = 1.0
    norm_constant: float | None = None  # None: the clipping norm
    loss_variant: str = "covariance"
    init_strategy: str = "random"
    canary_target: int | None = None  # None: uniformly random class

    def validate(self):
        if self.pool_size < 1 or self.samples_per_mock < 1 or self.design_iters < 1:
            raise ValueError("pool_size, samples_per_mock and design_iters must be positive")
        if self.canary_lr < 0:
            raise ValueError("canary_lr must be non-negative")
        if self.mock_clients_per_batch < 0:
            raise ValueError("mock_clients_per_batch must be non-negative")
        if self.loss_variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")
        if self.norm_constant is not None and self.norm_constant <= 0:
            raise ValueError("norm_constant must be positive")


@dataclass
class MockUpdateSet:
    updates: np.ndarray  # (m, d)
    sample_ids: list  # pool sample ids behind each mock client
    round_idx: int = 0

    def __len__(self):
        return self.updates.shape[0]

    @property
    def mean(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(self.updates.shape[1])
        return self.updates.mean(axis=0)


@dataclass
class Canary:
    sample: Sample
    health: float
    initial_loss: float
    final_loss: float
    losses: np.ndarray = field(repr=False, default=None)
    init_sample_id: int | None = None

    def to_json(self, design_config_hash: str = "") -> dict:
        return {"x": [float(v) for v in self.sample.x], "y_c": int(self.sample.y),
                "health": self.health, "initial_loss": self.initial_loss,
                "final_loss": self.final_loss, "design_config_hash": design_config_hash}


def health_score(initial_loss: float, final_loss: float) -> float:
    if not initial_loss > 0:
        return 0.0
    return float(min(1.0, max(0.0, 1.0 - final_loss / initial_loss)))


def build_mock_updates(spec: ModelSpec, theta, pool: SampleBatch, cfg: DesignConfig,
                       train_cfg: LocalTrainConfig, dp: DpConfig, exclude_ids=(),
                       root: int = 0, round_idx: int = 0) -> MockUpdateSet:
    """Group the first ``cfg.pool_size`` usable pool samples into mock clients."""
    keep = np.flatnonzero(~np.isin(pool.ids, np.asarray(list(exclude_ids), dtype=np.int64)))
    keep = keep[: cfg.pool_size]
    if len(keep) == 0:
        raise ValueError("design pool is empty")
    k = cfg.samples_per_mock
    mocks = [ClientDataset(j, pool.subset(keep[s:s + k]))
             for j, s in enumerate(range(0, len(keep), k))]
    U = client_updates(spec, theta, mocks, train_cfg, dp, root, round_idx)
    return MockUpdateSet(U, [m.data.ids.tolist() for m in mocks], round_idx)


def _norm_constant(norm_constant, dp):
    return dp.clip_norm if norm_constant is None else norm_constant


def canary_loss(spec: ModelSpec, theta, z: Sample, mocks: MockUpdateSet,
                variant: str = "covariance", norm_constant: float = 1.0) -> float:
    loss, _, _ = kernels.canary_objective(*spec.dims, np.asarray(theta, dtype=np.float64), z.x,
                                          int(z.y), mocks.updates, mocks.mean, VARIANTS[variant],
                                          float(norm_constant))
    return float(loss)


def canary_loss_grad(spec: ModelSpec, theta, z: Sample, mocks: MockUpdateSet,
                     variant: str = "covariance", norm_constant: float = 1.0) -> np.ndarray:
    _, gx, status = kernels.canary_objective(*spec.dims, np.asarray(theta, dtype=np.float64), z.x,
                                             int(z.y), mocks.updates, mocks.mean,
                                             VARIANTS[variant], float(norm_constant))
    if status == kernels.DEGENERATE:
        raise DegenerateGradientError("canary parameter gradient vanished with the norm hinge active")
    if status == kernels.NONFINITE:
        raise FloatingPointError("canary loss is not finite")
    return gx


def _initial_point(spec, pool, cfg, rng):
    if cfg.init_strategy == "pool_sample":
        i = int(rng.integers(len(pool)))
        return pool.x[i].copy(), int(pool.ids[i])
    lo, hi = pool.x.min(axis=0), pool.x.max(axis=0)
    mid, half = (lo + hi) / 2, 1.1 * (hi - lo) / 2
    return rng.uniform(mid - half, mid + half), None


def design_canary(spec: ModelSpec, theta, pool: SampleBatch, cfg: DesignConfig,
                  train_cfg: LocalTrainConfig, dp: DpConfig, rng: np.random.Generator,
                  root: int = 0, round_idx: int = 0) -> Canary:
    """Adam in input space on the design loss against mock clients built from ``pool``."""
    cfg.validate()
    if len(pool) == 0:
        raise ValueError("design pool is empty")
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    y_c = int(rng.integers(spec.num_classes)) if cfg.canary_target is None else int(cfg.canary_target)
    if not 0 <= y_c < spec.num_classes:
        raise ValueError(f"canary target {y_c} outside [0, {spec.num_classes})")
    x0, init_id = _initial_point(spec, pool, cfg, rng)
    mocks = build_mock_updates(spec, theta, pool, cfg, train_cfg, dp,
                               exclude_ids=() if init_id is None else (init_id,),
                               root=root, round_idx=round_idx)
    nc = float(_norm_constant(cfg.norm_constant, dp))
    variant = VARIANTS[cfg.loss_variant]
    U, ubar = np.ascontiguousarray(mocks.updates), mocks.mean
    b = cfg.mock_clients_per_batch
    if 0 < b < len(mocks):
        x, losses, status = _minibatch_design(spec, theta, x0, y_c, U, variant, nc, cfg, rng)
    else:
        x, losses, status = kernels.design_loop(*spec.dims, theta, x0, y_c, U, ubar, variant, nc,
                                                float(cfg.canary_lr), int(cfg.design_iters),
                                                ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    if status == kernels.DEGENERATE:
        raise DegenerateGradientError("canary gradient vanished during design")
    initial = canary_loss(spec, theta, Sample(x0, y_c), mocks, cfg.loss_variant, nc)
    final = canary_loss(spec, theta, Sample(x, y_c), mocks, cfg.loss_variant, nc)
    if status == kernels.NONFINITE or not (math.isfinite(initial) and math.isfinite(final)):
        raise FloatingPointError(
            f"canary design diverged (initial loss {initial}, final loss {final}, lr {cfg.canary_lr})")
    return Canary(Sample(x, y_c), health_score(initial, final), initial, final, losses, init_id)


def _minibatch_design(spec, theta, x0, y_c, U, variant, nc, cfg, rng):
    # stochastic variant: a fresh subset of mock clients at every Adam step
    x = x0.copy()
    m1 = np.zeros_like(x)
    m2 = np.zeros_like(x)
    losses = np.full(cfg.design_iters + 1, np.nan)
    for t in range(cfg.design_iters):
        idx = np.sort(rng.choice(len(U), cfg.mock_clients_per_batch, replace=False))
        Ub = np.ascontiguousarray(U[idx])
        loss, gx, status = kernels.canary_objective(*spec.dims, theta, x, y_c, Ub, Ub.mean(axis=0),
                                                    variant, nc)
        losses[t] = loss
        if status != kernels.OK:
            return x, losses, status
        m1 = ADAM_BETA1 * m1 + (1 - ADAM_BETA1) * gx
        m2 = ADAM_BETA2 * m2 + (1 - ADAM_BETA2) * gx * gx
        mhat = m1 / (1 - ADAM_BETA1 ** (t + 1))
        vhat = m2 / (1 - ADAM_BETA2 ** (t + 1))
        x = x - cfg.canary_lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return x, losses, kernels.OK


def canary_update(spec: ModelSpec, theta, canary: Canary, train_cfg: LocalTrainConfig,
                  dp: DpConfig) -> np.ndarray:
    """The rogue client's clipped update, rescaled to norm exactly C."""
    client = ClientDataset(-1, SampleBatch(canary.sample.x[None, :], [canary.sample.y], [-1]))
    u = local_update(spec, theta, client, train_cfg, dp)
    norm = np.linalg.norm(u)
    if not norm > 0:
        raise DegenerateGradientError("canary update is zero")
    return u * (dp.clip_norm / norm)


def design_config_dict(cfg: DesignConfig) -> dict:
    return asdict(cfg)
