"""Experiment drivers behind the ``audit`` command line.

Every run writes into one directory: ``config.json``, ``trace.csv``,
``report.json`` and ``plotdata/*.csv``.  Each artifact carries the hash of the
resolved configuration that produced it.
"""
from __future__ import annotations

import copy
import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import plotdata, storage, streams
from .accountant import epsilon_trace, get_noise, get_privacy, noise_for_target, per_round_eps
from .attack import (AttackTrace, PerRoundEpsilon, ScoreStats, per_round_epsilon, score_stats,
                     score_trials)
from .canary import Canary, canary_update, design_canary
from .config import ConfigError, ExperimentConfig
from .data import DatasetFormatError, FederatedDataset, generate, ingest_csv
from .fl import client_updates, run_training, train_round
from .models import ModelSpec, accuracy, init_params, param_count


@dataclass
class Run:
    """A resolved configuration with its dataset and model spec."""
    cfg: ExperimentConfig
    dataset: FederatedDataset
    spec: ModelSpec
    hash: str
    out: Path

    def evaluate(self, theta) -> float:
        pool = self.dataset.design_pool
        if len(pool) == 0:
            return math.nan
        return accuracy(self.spec, theta, pool.x, pool.y)


def load_dataset(cfg: ExperimentConfig) -> FederatedDataset:
    if cfg.dataset_csv:
        try:
            return ingest_csv(cfg.dataset_csv)
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {cfg.dataset_csv}: {exc}") from exc
    return generate(cfg.population)


def prepare(cfg: ExperimentConfig, output_dir=None) -> Run:
    """Validate, load the data, solve for sigma if an epsilon target is set."""
    cfg = copy.deepcopy(cfg)
    if output_dir is not None:
        cfg.output_dir = str(output_dir)
    cfg.validate()
    try:
        dataset = load_dataset(cfg)
    except DatasetFormatError as exc:
        raise ConfigError(str(exc)) from exc
    if not dataset.clients:
        raise ConfigError("dataset has no clients")
    spec = cfg.model.spec(dataset.input_dim, dataset.num_classes)
    if cfg.target_epsilon is not None:
        try:
            sigma = noise_for_target(cfg.target_epsilon, cfg.dp.sample_rate, cfg.rounds,
                                     cfg.dp.delta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.dp = replace(cfg.dp, noise_multiplier=sigma)
    if cfg.attack.seed is None:
        cfg.attack = replace(cfg.attack, seed=cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plotdata").mkdir(exist_ok=True)
    run = Run(cfg, dataset, spec, cfg.hash(), out)
    storage.write_json(out / "config.json", {"config_hash": run.hash, "config": cfg.to_dict()})
    return run


# --------------------------------------------------------------------------- training

def cmd_train(cfg: ExperimentConfig, output_dir=None) -> dict:
    run = prepare(cfg, output_dir)
    c = run.cfg
    t0 = time.perf_counter()
    result = run_training(run.spec, run.dataset, c.train, c.dp, c.rounds, c.seed, c.server_lr,
                          c.checkpoint_every, workers=c.workers)
    ckdir = run.out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    paths = {}
    for r, theta in result.checkpoints:
        p = ckdir / f"round_{r:06d}.bin"
        storage.write_params(p, theta)
        paths[r] = str(p.relative_to(run.out))
    records = [{"round": rec["round"], "theoretical_epsilon": rec["theoretical_epsilon"],
                "checkpoint_path": paths.get(rec["round"])} for rec in result.privacy_trace]
    storage.write_json(run.out / "privacy_trace.json", records)
    summary = {"config_hash": run.hash, "seed": c.seed, "rounds": c.rounds,
               "noise_multiplier": c.dp.noise_multiplier,
               "final_theoretical_epsilon": records[-1]["theoretical_epsilon"],
               "final_accuracy": run.evaluate(result.theta),
               "final_checkpoint": paths[c.rounds],
               "wall_clock_seconds": time.perf_counter() - t0}
    storage.write_json(run.out / "report.json", summary)
    return summary


# --------------------------------------------------------------------------- one attack

@dataclass
class Episode:
    canary: Canary
    u_c: np.ndarray
    trace: AttackTrace
    eps: PerRoundEpsilon
    stats: ScoreStats


def attack_episode(run: Run, theta, round_idx: int, cfg: ExperimentConfig | None = None,
                   seed: int | None = None) -> Episode:
    """Design one canary against frozen ``theta`` and score ``num_trials`` mock rounds."""
    cfg = run.cfg if cfg is None else cfg
    seed = cfg.seed if seed is None else seed
    attack = replace(cfg.attack, seed=seed)
    dp, tc = cfg.dp, cfg.train
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (param_count(run.spec),):
        raise ConfigError(f"parameter vector of length {theta.size} does not fit the model "
                          f"({param_count(run.spec)} parameters)")
    rng = streams.stream(seed, streams.CANARY, round_idx)
    canary = design_canary(run.spec, theta, run.dataset.design_pool, cfg.design, tc, dp, rng,
                           root=seed, round_idx=round_idx)
    u_c = canary_update(run.spec, theta, canary, tc, dp)
    U = client_updates(run.spec, theta, run.dataset.clients, tc, dp, seed, round_idx, cfg.workers)
    trace = score_trials(U, u_c, attack, dp, round_idx, cfg.workers)
    return Episode(canary, u_c, trace, per_round_epsilon(trace),
                   score_stats(trace, dp.noise_multiplier, dp.clip_norm))


def cmd_attack_checkpoint(cfg: ExperimentConfig, checkpoint=None, output_dir=None,
                          round_idx: int | None = None) -> Episode:
    """Attack a stored checkpoint, or the model after ``rounds`` rounds of training."""
    run = prepare(cfg, output_dir)
    c = run.cfg
    if checkpoint is None:
        theta = run_training(run.spec, run.dataset, c.train, c.dp, c.rounds, c.seed, c.server_lr,
                             c.rounds, workers=c.workers).theta
        round_idx = c.rounds if round_idx is None else round_idx
    else:
        try:
            theta = storage.read_params(checkpoint)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load checkpoint: {exc}") from exc
        round_idx = 0 if round_idx is None else round_idx
    t0 = time.perf_counter()
    ep = attack_episode(run, theta, round_idx)
    ep.trace.to_csv(run.out / "trace.csv", run.hash)
    canary = ep.canary.to_json(run.hash)
    storage.write_json(run.out / "canary.json", canary)
    report = {"config_hash": run.hash, "seed": c.seed, "round": round_idx,
              "model_accuracy": run.evaluate(theta),
              "per_round_epsilon": asdict(ep.eps), "score_stats": asdict(ep.stats),
              "canary": canary, "wall_clock_seconds": time.perf_counter() - t0}
    storage.write_json(run.out / "report.json", report)
    plotdata.write(ep.trace, "histogram", run.out / "plotdata" / "histogram.csv", run.hash)
    return ep


# --------------------------------------------------------------------------- monitoring

@dataclass
class MonitorRecord:
    round: int
    eps_hat: float
    ci_low: float
    ci_high: float
    theoretical_eps_round: float
    sigma_hat: float
    cumulative_eps_hat: float
    cumulative_theoretical_eps: float
    canary_health: float
    attack_accuracy: float
    threshold: float
    member_mean: float
    member_std: float
    nonmember_mean: float
    nonmember_std: float
    model_accuracy: float


@dataclass
class PrivacyReport:
    records: list = field(default_factory=list)
    final_eps_hat: float = math.nan
    final_theoretical_eps: float = math.nan
    config_hash: str = ""
    seed: int = 0
    noise_multiplier: float = 0.0
    sample_rate: float = 1.0
    wall_clock_seconds: float = 0.0
    status: str = "running"
    error: str | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["records"] = [asdict(r) for r in self.records]
        return d


def sigma_schedule(attacks: dict, upto: int) -> list:
    """Per-round noise estimates for rounds 1..``upto``.

    An estimate made at round r holds for rounds [r, r + s); rounds before the
    first attack take the first estimate.
    """
    rounds = sorted(a for a in attacks if a <= upto)
    if not rounds:
        raise ValueError("no attack at or before this round")
    out = []
    for r in range(1, upto + 1):
        prior = [a for a in rounds if a <= r]
        out.append(attacks[prior[-1] if prior else rounds[0]])
    return out


def cmd_monitor(cfg: ExperimentConfig, output_dir=None) -> PrivacyReport:
    """Train and attack every ``attack_frequency`` rounds on the frozen model."""
    run = prepare(cfg, output_dir)
    c = run.cfg
    t0 = time.perf_counter()
    dp, n = c.dp, c.attack.num_trials
    audit_delta = 1.0 / n
    report = PrivacyReport(config_hash=run.hash, seed=c.seed, noise_multiplier=dp.noise_multiplier,
                           sample_rate=dp.sample_rate)
    theory = epsilon_trace(dp.noise_multiplier, dp.sample_rate, c.rounds, dp.delta)
    eps_round = per_round_eps(dp.noise_multiplier, audit_delta) if dp.noise_multiplier > 0 else math.inf
    theta = init_params(run.spec, streams.stream(c.seed, streams.INIT))
    sigma_hat = {}

    def save():
        report.wall_clock_seconds = time.perf_counter() - t0
        storage.write_json(run.out / "report.json", report.to_json())

    try:
        for r in range(1, c.rounds + 1):
            theta, _ = train_round(run.spec, theta, run.dataset, c.train, dp, c.server_lr, c.seed, r,
                                   c.workers)
            if not np.all(np.isfinite(theta)):
                raise FloatingPointError(f"non-finite parameters after round {r}")
            if r % c.attack_frequency:
                continue
            frozen = theta.copy()
            ep = attack_episode(run, theta, r)
            if not np.array_equal(frozen, theta):
                raise AssertionError("attack episode modified the global model")
            ep.trace.to_csv(run.out / f"trace_round_{r:06d}.csv", run.hash)
            sigma_hat[r] = get_noise(ep.eps.eps_hat, audit_delta)
            cumulative = get_privacy(sigma_schedule(sigma_hat, r), dp.delta, dp.sample_rate)
            report.records.append(MonitorRecord(
                r, ep.eps.eps_hat, ep.eps.ci_low, ep.eps.ci_high, eps_round, sigma_hat[r],
                cumulative, theory[r - 1], ep.canary.health, ep.eps.attack_accuracy,
                ep.eps.threshold, ep.stats.member_mean, ep.stats.member_std,
                ep.stats.nonmember_mean, ep.stats.nonmember_std, run.evaluate(theta)))
            save()
        report.final_eps_hat = get_privacy(sigma_schedule(sigma_hat, c.rounds), dp.delta,
                                           dp.sample_rate)
        report.final_theoretical_eps = theory[-1]
        report.status = "complete"
    except BaseException as exc:
        report.status = "aborted"
        report.error = f"{type(exc).__name__}: {exc}"
        save()
        raise
    save()
    last = max(sigma_hat)
    ep.trace.to_csv(run.out / "trace.csv", run.hash)
    storage.write_params(run.out / "final_params.bin", theta)
    plotdata.write(report, "eps-vs-round", run.out / "plotdata" / "eps_vs_round.csv", run.hash)
    plotdata.write(report, "eps-vs-epoch", run.out / "plotdata" / "eps_vs_epoch.csv", run.hash)
    plotdata.write(AttackTrace.from_csv(run.out / f"trace_round_{last:06d}.csv", last),
                   "histogram", run.out / "plotdata" / "histogram.csv", run.hash)
    return report


# --------------------------------------------------------------------------- ablations

SWEEP_PARAMS = {
    "pool_size": ("design", int),
    "design_iters": ("design", int),
    "clients_per_round": ("attack", int),
    "init_strategy": ("design", str),
    "loss_variant": ("design", str),
    "norm_constant": ("design", float),
}

ABLATION_METRICS = ["attack_accuracy", "eps_hat", "ci_low", "ci_high", "health",
                    "member_std", "nonmember_std", "separation"]


def parse_sweep(items) -> dict:
    """``["pool_size=32,512", ...]`` -> ``{"pool_size": [32, 512], ...}``."""
    sweep = {}
    for item in items:
        name, sep, values = item.partition("=")
        name = name.strip()
        if not sep or name not in SWEEP_PARAMS:
            raise ConfigError(f"bad sweep {item!r}; expected one of {sorted(SWEEP_PARAMS)}=v1,v2")
        cast = SWEEP_PARAMS[name][1]
        try:
            sweep[name] = [cast(v.strip()) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad value in sweep {item!r}: {exc}") from exc
        if not sweep[name]:
            raise ConfigError(f"sweep {name!r} has no values")
    if not sweep:
        raise ConfigError("empty sweep")
    return sweep


def apply_cell(cfg: ExperimentConfig, cell: dict) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    for name, value in cell.items():
        section = getattr(cfg, SWEEP_PARAMS[name][0])
        setattr(section, name, value)
    try:
        cfg.design.validate()
        cfg.attack.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def accuracy_checkpoint(run: Run):
    """Parameters at the first round reaching ``accuracy_fraction`` of the non-private ceiling.

    The ceiling is the best held-out accuracy of a noise-free run of ``rounds``
    rounds.  Returns (theta, round, accuracy, ceiling).
    """
    c = run.cfg
    clean = replace(c.dp, noise_multiplier=0.0)
    theta = init_params(run.spec, streams.stream(c.seed, streams.INIT))
    ceiling = 0.0
    for r in range(1, c.rounds + 1):
        theta, _ = train_round(run.spec, theta, run.dataset, c.train, clean, c.server_lr, c.seed,
                               r, c.workers)
        ceiling = max(ceiling, run.evaluate(theta))
    target = c.accuracy_fraction * ceiling
    theta = init_params(run.spec, streams.stream(c.seed, streams.INIT))
    for r in range(1, c.max_rounds + 1):
        theta, _ = train_round(run.spec, theta, run.dataset, c.train, c.dp, c.server_lr, c.seed,
                               r, c.workers)
        acc = run.evaluate(theta)
        if acc >= target:
            return theta, r, acc, ceiling
    raise FloatingPointError(
        f"accuracy {acc:.3f} still below target {target:.3f} after {c.max_rounds} rounds")


def cmd_ablation(cfg: ExperimentConfig, sweep: dict, repeats: int = 1, output_dir=None,
                 checkpoint=None) -> list:
    """Run one attack per grid cell and seed at a fixed-accuracy checkpoint.

    Returns the rows written to ``ablation.csv``.
    """
    if repeats < 1:
        raise ConfigError("repeats must be positive")
    for name in sweep:
        if name not in SWEEP_PARAMS:
            raise ConfigError(f"cannot sweep {name!r}")
    run = prepare(cfg, output_dir)
    c = run.cfg
    t0 = time.perf_counter()
    if checkpoint is None:
        theta, ck_round, ck_acc, ceiling = accuracy_checkpoint(run)
    else:
        theta, ck_round, ceiling = checkpoint, 0, math.nan
        ck_acc = run.evaluate(theta)
    storage.write_params(run.out / "checkpoint.bin", theta)
    names = list(sweep)
    cells = [dict(zip(names, values)) for values in itertools.product(*(sweep[k] for k in names))]
    jobs = [(cell, c.seed + i) for cell in cells for i in range(repeats)]
    cell_cfgs = [apply_cell(c, cell) for cell in cells]

    def job(j):
        cell, seed = jobs[j]
        ep = attack_episode(run, theta, ck_round, cell_cfgs[j // repeats], seed)
        return [cell[k] for k in names] + [seed, ep.eps.attack_accuracy, ep.eps.eps_hat,
                                           ep.eps.ci_low, ep.eps.ci_high, ep.canary.health,
                                           ep.stats.member_std, ep.stats.nonmember_std,
                                           ep.stats.separation]

    if c.workers > 1:
        with ThreadPoolExecutor(c.workers) as ex:
            rows = list(ex.map(job, range(len(jobs))))
    else:
        rows = [job(j) for j in range(len(jobs))]
    header = names + ["seed"] + ABLATION_METRICS
    storage.write_csv(run.out / "ablation.csv", header, rows, run.hash)
    storage.write_json(run.out / "report.json", {
        "config_hash": run.hash, "seed": c.seed, "sweep": sweep, "repeats": repeats,
        "checkpoint_round": ck_round, "checkpoint_accuracy": ck_acc,
        "accuracy_ceiling": ceiling, "wall_clock_seconds": time.perf_counter() - t0})
    plotdata.write((header, rows), "sweep-heatmap", run.out / "plotdata" / "sweep_heatmap.csv",
                   run.hash)
    return [dict(zip(header, row)) for row in rows]
