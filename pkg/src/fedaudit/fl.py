"""DP-FedSGD simulation: Poisson client sampling, one local epoch of SGD,
update clipping, and an honest noisy sum standing in for secure aggregation."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .accountant import epsilon_trace
from .data import ClientDataset, FederatedDataset
from .models import ModelSpec, batch_param_grads, init_params, param_count

# clients are processed in fixed-size chunks so results do not depend on the
# number of workers
CHUNK = 256


@dataclass
class DpConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    sample_rate: float = 0.01
    delta: float = 1e-5

    def validate(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if not 0 < self.sample_rate <= 1:
            raise ValueError("sample_rate must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


@dataclass
class LocalTrainConfig:
    client_lr: float = 0.01
    batch_size: int = 32
    local_epochs: int = 1

    def validate(self):
        if self.client_lr < 0:
            raise ValueError("client_lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.local_epochs != 1:
            raise ValueError("only a single local epoch is supported")


@dataclass
class NoisyAggregate:
    value: np.ndarray
    participant_count: int


def clip(v: np.ndarray, c: float) -> np.ndarray:
    """Scale ``v`` onto the ball of radius ``c``; vectors inside are returned as is."""
    norm = np.linalg.norm(v)
    if norm > c:
        return v * (c / norm)
    return v


def _single_batch_updates(spec, theta, X, Y, starts, lr, clip_norm):
    # one SGD step per client on its whole dataset; rows of X are grouped by client
    G = batch_param_grads(spec, theta, X, Y)
    counts = np.diff(np.append(starts, len(Y)))
    U = -lr * (np.add.reduceat(G, starts, axis=0) / counts[:, None])
    norms = np.linalg.norm(U, axis=1)
    over = norms > clip_norm
    U[over] *= (clip_norm / norms[over])[:, None]
    return U


def local_update(spec: ModelSpec, theta, client: ClientDataset, cfg: LocalTrainConfig,
                 dp: DpConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Clipped model delta after one local epoch of mini-batch SGD."""
    n = len(client)
    if n == 0:
        raise ValueError(f"client {client.client_id} has no samples")
    theta = np.asarray(theta, dtype=np.float64)
    X, Y = client.data.x, client.data.y
    if n <= cfg.batch_size:
        return _single_batch_updates(spec, theta, X, Y, np.array([0]), cfg.client_lr,
                                     dp.clip_norm)[0]
    if rng is None:
        raise ValueError("multi-batch clients need an RNG stream for shuffling")
    order = rng.permutation(n)
    delta = np.zeros_like(theta)
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        G = batch_param_grads(spec, theta + delta, X[idx], Y[idx])
        delta -= cfg.client_lr * G.mean(axis=0)
    return clip(delta, dp.clip_norm)


def client_updates(spec, theta, clients, cfg, dp, root: int, round_idx: int,
                   workers: int = 1) -> np.ndarray:
    """Updates for many clients, one row per client, in the given order.

    Client ``i``'s shuffling stream is derived from (root, round, client_id).
    """
    d = param_count(spec)
    if len(clients) == 0:
        return np.zeros((0, d))

    def run_chunk(chunk):
        out = np.empty((len(chunk), d))
        single = [j for j, c in enumerate(chunk) if 0 < len(c) <= cfg.batch_size]
        if single:
            X = np.concatenate([chunk[j].data.x for j in single])
            Y = np.concatenate([chunk[j].data.y for j in single])
            sizes = np.array([len(chunk[j]) for j in single])
            starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
            out[single] = _single_batch_updates(spec, theta, X, Y, starts, cfg.client_lr,
                                                dp.clip_norm)
        for j, c in enumerate(chunk):
            if not 0 < len(c) <= cfg.batch_size:
                rng = streams.stream(root, streams.CLIENT, round_idx, c.client_id)
                out[j] = local_update(spec, theta, c, cfg, dp, rng)
        return out

    chunks = [clients[i:i + CHUNK] for i in range(0, len(clients), CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run_chunk, chunks))
    else:
        parts = [run_chunk(c) for c in chunks]
    return np.concatenate(parts)


def poisson_select(population_size: int, q: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < q <= 1:
        raise ValueError("sample rate must lie in (0, 1]")
    return np.flatnonzero(rng.random(population_size) < q)


def aggregate(updates, dp: DpConfig, rng: np.random.Generator, dim: int | None = None) -> NoisyAggregate:
    """Unweighted sum of client updates plus N(0, (sigma C)^2 I) noise."""
    updates = np.asarray(updates, dtype=np.float64)
    if updates.ndim != 2:
        if dim is None:
            raise ValueError("dimension needed to aggregate an empty update list")
        updates = updates.reshape(0, dim)
    total = updates.sum(axis=0)
    if dp.noise_multiplier > 0:
        total = total + rng.normal(0.0, dp.noise_multiplier * dp.clip_norm, size=total.shape)
    return NoisyAggregate(total, updates.shape[0])


def server_step(theta, agg: NoisyAggregate, server_lr: float, expected_count: float) -> np.ndarray:
    if expected_count <= 0:
        raise ValueError("expected_count must be positive")
    # callers check finiteness and report divergence themselves
    with np.errstate(over="ignore", invalid="ignore"):
        return np.asarray(theta) + server_lr * agg.value / expected_count


def train_round(spec, theta, dataset: FederatedDataset, cfg, dp, server_lr, root, round_idx,
                workers=1):
    """One DP-FedSGD round; returns (new parameters, number of participants)."""
    N = len(dataset.clients)
    chosen = poisson_select(N, dp.sample_rate, streams.stream(root, streams.SELECT, round_idx))
    U = client_updates(spec, theta, [dataset.clients[i] for i in chosen], cfg, dp, root,
                       round_idx, workers)
    agg = aggregate(U, dp, streams.stream(root, streams.NOISE, round_idx), dim=len(theta))
    return server_step(theta, agg, server_lr, dp.sample_rate * N), len(chosen)


@dataclass
class TrainingResult:
    theta: np.ndarray
    checkpoints: list = field(default_factory=list)  # (round, parameters)
    privacy_trace: list = field(default_factory=list)  # {round, theoretical_epsilon}


def run_training(spec: ModelSpec, dataset: FederatedDataset, cfg: LocalTrainConfig, dp: DpConfig,
                 rounds: int, root: int, server_lr: float = 1.0, checkpoint_every: int = 1,
                 theta0=None, start_round: int = 0, workers: int = 1) -> TrainingResult:
    if rounds < 1:
        raise ValueError("need at least one round")
    cfg.validate()
    dp.validate()
    theta = (init_params(spec, streams.stream(root, streams.INIT)) if theta0 is None
             else np.array(theta0, dtype=np.float64))
    eps = epsilon_trace(dp.noise_multiplier, dp.sample_rate, start_round + rounds, dp.delta)
    result = TrainingResult(theta)
    for r in range(start_round + 1, start_round + rounds + 1):
        theta, _ = train_round(spec, theta, dataset, cfg, dp, server_lr, root, r, workers)
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError(f"non-finite parameters after round {r}")
        result.privacy_trace.append({"round": r, "theoretical_epsilon": eps[r - 1]})
        if (r - start_round) % checkpoint_every == 0 or r == start_round + rounds:
            result.checkpoints.append((r, theta.copy()))
    result.theta = theta
    return result
