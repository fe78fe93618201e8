"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Provides the theoretical per-round and cumulative epsilon of DP-FedSGD and the
empirical counterpart: per-round empirical epsilons are inverted into one-step
noise multipliers (``get_noise``) which are then composed with amplification by
subsampling (``get_privacy``).

Conventions: ``sigma == 0`` means no noise (infinite RDP, infinite epsilon) and
``sigma == inf`` means a round that leaks nothing (zero RDP).
"""
from __future__ import annotations

import functools
import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, gammasgn, log_ndtr, logsumexp

# the large orders keep the zero-RDP floor of the conversion below 0.01
DEFAULT_ORDERS = np.unique(np.concatenate([np.linspace(1.25, 63.0, 128),
                                           np.arange(2, 65, dtype=np.float64),
                                           [80.0, 96.0, 128.0, 256.0, 512.0, 1024.0]]))

_SERIES_CUTOFF = -30.0


def _log_binom(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _log_a_int(q, sigma, alpha):
    i = np.arange(int(alpha) + 1, dtype=np.float64)
    terms = (_log_binom(alpha, i) + i * math.log(q) + (alpha - i) * math.log1p(-q)
             + (i * i - i) / (2 * sigma**2))
    return float(logsumexp(terms))


def _log_a_frac(q, sigma, alpha):
    # Exact series for fractional orders.  The two tails of the Gaussian
    # integral, split at z0, are expanded separately; binomial coefficients turn
    # negative past alpha, so positive and negative parts are summed apart.
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    pos, neg = [], []
    i = 0
    while True:
        j = alpha - i
        coef_sign = gammasgn(alpha - i + 1)
        log_coef = float(_log_abs_binom(alpha, i))
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        # log(0.5 * erfc(u / sqrt(2))) == log_ndtr(-u)
        log_e0 = float(log_ndtr(-(i - z0) / sigma))
        log_e1 = float(log_ndtr(-(z0 - j) / sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1
        bucket = pos if coef_sign > 0 else neg
        bucket.extend((log_s0, log_s1))
        i += 1
        if i > alpha + 1 and max(log_s0, log_s1) < _SERIES_CUTOFF:
            break
    lp = logsumexp(pos)
    if not neg:
        return float(lp)
    ln = logsumexp(neg)
    return float(lp + math.log1p(-math.exp(ln - lp)))


def _log_abs_binom(alpha, i):
    # |binom(alpha, i)| for real alpha via |Gamma|; gammaln already returns log|Gamma|
    return gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)


def sgm_rdp(sigma: float, q: float, alpha: float) -> float:
    """RDP of one step of the subsampled Gaussian mechanism at order ``alpha``."""
    if alpha <= 1:
        raise ValueError("RDP orders must exceed 1")
    if not 0 <= q <= 1:
        raise ValueError("sample rate must lie in [0, 1]")
    if sigma == 0:
        return math.inf
    if math.isinf(sigma) or q == 0:
        return 0.0
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, alpha)
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(log_a, 0.0) / (alpha - 1)


def compute_rdp(sigma: float, q: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    orders = np.asarray(orders, dtype=np.float64)
    if q == 1.0 and 0 < sigma < math.inf:
        return orders / (2 * sigma**2)
    return np.array([sgm_rdp(sigma, q, a) for a in orders])


@dataclass(frozen=True)
class RdpCurve:
    orders: np.ndarray
    rdp: np.ndarray

    def __post_init__(self):
        if len(self.orders) != len(self.rdp):
            raise ValueError("orders and rdp values differ in length")

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if not np.array_equal(self.orders, other.orders):
            raise ValueError("cannot compose curves on different order grids")
        return RdpCurve(self.orders, self.rdp + other.rdp)

    def scaled(self, steps: int) -> "RdpCurve":
        return RdpCurve(self.orders, self.rdp * steps)

    def epsilon(self, delta: float, classical: bool = False):
        return rdp_to_eps(self, delta, classical=classical)


def rdp_curve(sigma, q, steps=1, orders=DEFAULT_ORDERS) -> RdpCurve:
    orders = np.asarray(orders, dtype=np.float64)
    rdp = compute_rdp(sigma, q, orders)
    if steps == 0:
        rdp = np.zeros_like(rdp)
    return RdpCurve(orders, rdp * steps if steps != 1 else rdp)


def rdp_to_eps(curve: RdpCurve, delta: float, classical: bool = False):
    """Convert an RDP curve to (epsilon, best order).

    The default is the hypothesis-testing conversion of Balle et al.; pass
    ``classical=True`` for the looser ``rdp + log(1/delta)/(alpha-1)``.
    """
    if len(curve.orders) == 0:
        raise ValueError("empty RDP curve")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    a = np.asarray(curve.orders, dtype=np.float64)
    rdp = np.asarray(curve.rdp, dtype=np.float64)
    if classical:
        eps = rdp + math.log(1 / delta) / (a - 1)
    else:
        eps = rdp + np.log1p(-1 / a) - (math.log(delta) + np.log(a)) / (a - 1)
    eps = np.where(np.isnan(eps), np.inf, eps)
    k = int(np.argmin(eps))
    return max(float(eps[k]), 0.0), float(a[k])


def compose_epsilon(sigma: float, q: float, steps: int, delta: float,
                    orders=DEFAULT_ORDERS, classical: bool = False) -> float:
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    return rdp_to_eps(rdp_curve(sigma, q, steps, orders), delta, classical)[0]


def epsilon_trace(sigma: float, q: float, rounds: int, delta: float,
                  orders=DEFAULT_ORDERS) -> list:
    """Cumulative theoretical epsilon after each of rounds 1..``rounds``."""
    if sigma == 0:
        return [math.inf] * rounds
    one = rdp_curve(sigma, q, 1, orders)
    return [one.scaled(r).epsilon(delta)[0] for r in range(1, rounds + 1)]


def per_round_eps(sigma: float, delta: float, orders=DEFAULT_ORDERS) -> float:
    """Theoretical epsilon of a single unsubsampled step."""
    return compose_epsilon(sigma, 1.0, 1, delta, orders)


def _invert_decreasing(f, target, lo=1e-3, hi=1e3, rtol=1e-6):
    """Find sigma with f(sigma) == target for decreasing f; returns (sigma, bracketed)."""
    floor, ceil = 1e-12, 1e12
    while f(lo) < target and lo > floor:
        lo /= 10
    while f(hi) > target and hi < ceil:
        hi *= 10
    if f(lo) < target:
        return lo, False
    if f(hi) > target:
        return hi, False
    for _ in range(300):
        mid = math.sqrt(lo * hi)
        val = f(mid)
        if abs(val - target) <= 0.1 * rtol * target:
            return mid, True
        if val > target:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1 < 1e-15:
            break
    return math.sqrt(lo * hi), True


def solve_noise(eps_target: float, delta: float, orders=DEFAULT_ORDERS):
    """One-step noise multiplier matching ``eps_target``; returns (sigma, bracketed)."""
    if math.isinf(eps_target):
        return 0.0, True
    if eps_target <= 0:
        return math.inf, True
    return _invert_decreasing(lambda s: per_round_eps(s, delta, orders), eps_target)


def get_noise(eps_target: float, delta: float, orders=DEFAULT_ORDERS) -> float:
    sigma, bracketed = solve_noise(eps_target, delta, orders)
    if not bracketed:
        warnings.warn(f"epsilon {eps_target} could not be bracketed; returning boundary sigma {sigma}")
    return sigma


def noise_for_target(eps_target: float, q: float, steps: int, delta: float,
                     orders=DEFAULT_ORDERS) -> float:
    """Noise multiplier giving ``eps_target`` after ``steps`` subsampled rounds."""
    sigma, bracketed = _invert_decreasing(
        lambda s: compose_epsilon(s, q, steps, delta, orders), eps_target, lo=0.1, hi=10.0)
    if not bracketed:
        raise ValueError(f"cannot reach epsilon {eps_target} with q={q}, steps={steps}")
    return sigma


def get_privacy(sigmas, delta: float, q: float, orders=DEFAULT_ORDERS) -> float:
    """Compose per-round noise estimates into a cumulative empirical epsilon."""
    sigmas = list(sigmas)
    if not sigmas:
        raise ValueError("empty noise trace")
    orders = np.asarray(orders, dtype=np.float64)
    total = np.zeros_like(orders)
    # identical rounds are multiplied, not summed, so a constant trace is
    # bit-identical to compose_epsilon
    for sigma, count in sorted(Counter(float(s) for s in sigmas).items()):
        if sigma == 0:
            return math.inf
        total = total + _cached_rdp(sigma, q, orders.tobytes()) * count
    return rdp_to_eps(RdpCurve(orders, total), delta)[0]


@functools.lru_cache(maxsize=4096)
def _cached_rdp(sigma, q, orders_key):
    # monitoring re-composes the same few noise levels after every attack
    rdp = compute_rdp(sigma, q, np.frombuffer(orders_key, dtype=np.float64))
    rdp.setflags(write=False)
    return rdp
