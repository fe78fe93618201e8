"""Frozen-model canary attack and the per-round empirical epsilon.

Each trial draws a fresh honest cohort, forms the noisy aggregate with or
without the canary update ``u_c`` and scores it as ``<aggregate, u_c>``.
Exactly half the trials carry the canary.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from . import storage, streams
from .data import FederatedDataset
from .fl import DpConfig, LocalTrainConfig, client_updates


TRACE_HEADER = ["trial_index", "member", "score"]


@dataclass
class AttackConfig:
    num_trials: int = 100
    clients_per_round: int | None = None  # None: the expected cohort size q * N
    seed: int | None = None  # None: the experiment's root seed (0 standalone)

    def validate(self):
        if self.num_trials < 2 or self.num_trials % 2:
            raise ValueError("num_trials must be an even number >= 2")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise ValueError("clients_per_round must be positive")

    def cohort_size(self, dp, population_size: int) -> int:
        if self.clients_per_round is not None:
            return self.clients_per_round
        return max(1, int(round(dp.sample_rate * population_size)))


@dataclass
class AttackTrace:
    scores: np.ndarray
    member: np.ndarray
    round_idx: int = 0
    canary_norm: float = 1.0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.member = np.asarray(self.member, dtype=bool)
        if self.scores.shape != self.member.shape:
            raise ValueError("scores and membership differ in length")

    def __len__(self):
        return len(self.scores)

    def to_csv(self, path, config_hash: str | None = None):
        rows = [(i, bool(m), float(s)) for i, (m, s) in enumerate(zip(self.member, self.scores))]
        storage.write_csv(path, TRACE_HEADER, rows, config_hash)

    @classmethod
    def from_csv(cls, path, round_idx=0):
        header, rows = storage.read_csv(path)
        if header != TRACE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(TRACE_HEADER)}")
        rows.sort(key=lambda r: int(r[0]))
        return cls([float(r[2]) for r in rows], [r[1] == "1" for r in rows], round_idx)


@dataclass
class ScoreStats:
    member_mean: float
    member_std: float
    nonmember_mean: float
    nonmember_std: float
    separation: float
    noise_std: float  # sigma * C * |u_c|, the spread expected from DP noise alone


@dataclass
class PerRoundEpsilon:
    eps_hat: float
    ci_low: float
    ci_high: float
    threshold: float
    fpr: float
    fnr: float
    delta: float
    false_positives: int
    false_negatives: int
    attack_accuracy: float


def _cohort(root, round_idx, trial, n_clients, k):
    rng = streams.stream(root, streams.TRIAL_COHORT, round_idx, trial)
    return np.sort(rng.choice(n_clients, size=k, replace=False))


def score_trials(theta_updates, u_c, attack_cfg: AttackConfig, dp: DpConfig, round_idx: int = 0,
                 workers: int = 1) -> AttackTrace:
    """Score ``num_trials`` mock rounds on precomputed honest client updates.

    ``theta_updates`` is the (N, d) matrix of every client's clipped update at
    the frozen model; the model itself is never touched.
    """
    attack_cfg.validate()
    U = np.asarray(theta_updates, dtype=np.float64)
    u_c = np.asarray(u_c, dtype=np.float64)
    N, n = U.shape[0], attack_cfg.num_trials
    k = attack_cfg.cohort_size(dp, N)
    if k > N:
        raise ValueError(f"cannot draw {k} clients from a population of {N}")
    root = attack_cfg.seed or 0
    order = streams.stream(root, streams.TRIAL_ORDER, round_idx).permutation(n)
    member = np.zeros(n, dtype=bool)
    member[order[: n // 2]] = True
    std = dp.noise_multiplier * dp.clip_norm

    def trial(t):
        total = U[_cohort(root, round_idx, t, N, k)].sum(axis=0)
        if member[t]:
            total = total + u_c
        if std > 0:
            noise = streams.stream(root, streams.TRIAL_NOISE, round_idx, t).normal(0.0, std, U.shape[1])
            total = total + noise
        return float(total @ u_c)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            scores = list(ex.map(trial, range(n)))
    else:
        scores = [trial(t) for t in range(n)]
    return AttackTrace(np.array(scores), member, round_idx, float(np.linalg.norm(u_c)))


def run_trials(spec, theta, dataset: FederatedDataset, u_c, attack_cfg: AttackConfig,
               train_cfg: LocalTrainConfig, dp: DpConfig, round_idx: int = 0,
               workers: int = 1) -> AttackTrace:
    """Attack a client population at frozen parameters ``theta``.

    Every client's update is computed once at ``theta``; trials then differ only
    in cohort, canary insertion and noise.
    """
    U = client_updates(spec, theta, dataset.clients, train_cfg, dp, attack_cfg.seed or 0,
                       round_idx, workers)
    return score_trials(U, u_c, attack_cfg, dp, round_idx, workers)


def score_stats(trace: AttackTrace, noise_multiplier: float = 0.0, clip_norm: float = 1.0) -> ScoreStats:
    s, m = trace.scores, trace.member
    if m.sum() < 1 or (~m).sum() < 1:
        raise ValueError("trace needs both member and non-member trials")

    def std(a):
        return float(np.std(a, ddof=1)) if len(a) > 1 else 0.0

    mm, nm = float(s[m].mean()), float(s[~m].mean())
    return ScoreStats(mm, std(s[m]), nm, std(s[~m]), mm - nm,
                      noise_multiplier * clip_norm * trace.canary_norm)


def epsilon_from_rates(fpr: float, fnr: float, delta: float) -> float:
    """max(log((1-d-FPR)/FNR), log((1-d-FNR)/FPR)), floored at 0.

    A branch whose numerator is not positive carries no evidence and is
    dropped; a positive numerator over a zero rate is infinite.
    """
    def branch(num, den):
        if num <= 0:
            return -math.inf
        if den <= 0:
            return math.inf
        return math.log(num / den)

    eps = max(branch(1 - delta - fpr, fnr), branch(1 - delta - fnr, fpr))
    return max(eps, 0.0)


def _error_counts(trace):
    s, m = trace.scores, trace.member
    mem, non = np.sort(s[m]), np.sort(s[~m])
    thresholds = np.concatenate([[-np.inf], np.unique(s), [np.inf]])
    # predict "member" when score >= threshold
    fp = len(non) - np.searchsorted(non, thresholds, side="left")
    fn = np.searchsorted(mem, thresholds, side="left")
    return thresholds, fp, fn, len(non), len(mem)


def attack_accuracy(trace: AttackTrace) -> float:
    _, fp, fn, n0, n1 = _error_counts(trace)
    return float(1 - (fp + fn).min() / (n0 + n1))


def per_round_epsilon(trace: AttackTrace, delta: float | None = None,
                      confidence: float = 0.95) -> PerRoundEpsilon:
    """Threshold-maximised empirical epsilon with Clopper-Pearson bounds.

    Zero error counts are clamped to one error in n/2 trials, which caps the
    estimate at log((1 - delta - 2/n) / (2/n)).
    """
    n = len(trace)
    delta = 1.0 / n if delta is None else delta
    thresholds, fp, fn, n0, n1 = _error_counts(trace)
    fpr = np.maximum(fp, 1) / n0
    fnr = np.maximum(fn, 1) / n1
    eps = np.array([epsilon_from_rates(a, b, delta) for a, b in zip(fpr, fnr)])
    # among equally good thresholds prefer the one with fewest errors
    best = np.lexsort((fp + fn, -eps))[0]
    k0, k1 = int(fp[best]), int(fn[best])
    fp_ci = binomtest(k0, n0).proportion_ci(confidence, method="exact")
    fn_ci = binomtest(k1, n1).proportion_ci(confidence, method="exact")
    lo = epsilon_from_rates(fp_ci.high, fn_ci.high, delta)
    hi = epsilon_from_rates(fp_ci.low, fn_ci.low, delta)
    return PerRoundEpsilon(float(eps[best]), lo, hi, float(thresholds[best]), float(fpr[best]),
                           float(fnr[best]), delta, k0, k1,
                           float(1 - (fp + fn).min() / (n0 + n1)))
