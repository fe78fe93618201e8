"""Plot-ready long-format CSV emitters.

Columns per kind:

``histogram``       round, trial_index, group, score  (one row per trial;
                    group is ``member`` or ``nonmember``)
``eps-vs-round``    round, eps_hat, ci_low, ci_high, theoretical_eps_round,
                    sigma_hat, cumulative_eps_hat, cumulative_theoretical_eps
``eps-vs-epoch``    epoch, round, cumulative_eps_hat, cumulative_theoretical_eps,
                    eps_hat, theoretical_eps_round  (epoch = round * q)
``sweep-heatmap``   x_param, x_value, y_param, y_value, metric, mean, std, n
                    (one row per grid cell and metric, averaged over seeds;
                    y columns are empty for one-parameter sweeps)

Infinite values are written as ``inf``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import storage
from .attack import AttackTrace

HEADERS = {
    "histogram": ["round", "trial_index", "group", "score"],
    "eps-vs-round": ["round", "eps_hat", "ci_low", "ci_high", "theoretical_eps_round",
                     "sigma_hat", "cumulative_eps_hat", "cumulative_theoretical_eps"],
    "eps-vs-epoch": ["epoch", "round", "cumulative_eps_hat", "cumulative_theoretical_eps",
                     "eps_hat", "theoretical_eps_round"],
    "sweep-heatmap": ["x_param", "x_value", "y_param", "y_value", "metric", "mean", "std", "n"],
}
KINDS = tuple(HEADERS)


class UnknownKindError(ValueError):
    pass


def _records(report):
    if isinstance(report, (str, Path)):
        report = storage.read_json(report)
    if isinstance(report, dict):
        recs = [{k: storage.desanitize(v) for k, v in r.items()} for r in report["records"]]
        q = float(report.get("sample_rate", 1.0))
    else:
        from dataclasses import asdict
        recs = [asdict(r) for r in report.records]
        q = report.sample_rate
    return sorted(recs, key=lambda r: r["round"]), q


def histogram_rows(trace):
    if isinstance(trace, (str, Path)):
        trace = AttackTrace.from_csv(trace)
    return [(trace.round_idx, i, "member" if m else "nonmember", float(s))
            for i, (m, s) in enumerate(zip(trace.member, trace.scores))]


def eps_round_rows(report):
    recs, _ = _records(report)
    return [tuple(r[h] for h in HEADERS["eps-vs-round"]) for r in recs]


def eps_epoch_rows(report):
    recs, q = _records(report)
    return [(r["round"] * q,) + tuple(r[h] for h in HEADERS["eps-vs-epoch"][1:]) for r in recs]


def sweep_rows(sweep):
    if isinstance(sweep, (str, Path)):
        header, raw = storage.read_csv(sweep)
    else:
        header, raw = sweep
    seed_at = header.index("seed")
    params = header[:seed_at]
    metrics = header[seed_at + 1:]
    if not 1 <= len(params) <= 2:
        raise ValueError("heatmaps need a sweep over one or two parameters")
    cells = {}
    for row in raw:
        key = tuple(str(v) for v in row[:seed_at])
        cells.setdefault(key, []).append([float(v) for v in row[seed_at + 1:]])
    out = []
    for key, vals in cells.items():
        vals = np.array(vals)
        x = (params[0], key[0])
        y = (params[1], key[1]) if len(params) == 2 else ("", "")
        for j, m in enumerate(metrics):
            col = vals[:, j]
            # constant columns (all-inf theoretical eps) have zero spread, inf mixed with finite is unbounded
            if np.all(col == col[0]):
                std = 0.0
            elif not np.all(np.isfinite(col)):
                std = float("inf")
            else:
                std = float(np.std(col, ddof=1))
            out.append(x + y + (m, float(np.mean(col)), std, len(col)))
    return out


_BUILDERS = {"histogram": histogram_rows, "eps-vs-round": eps_round_rows,
             "eps-vs-epoch": eps_epoch_rows, "sweep-heatmap": sweep_rows}


def rows(source, kind: str):
    if kind not in _BUILDERS:
        raise UnknownKindError(f"unknown plot kind {kind!r}; choose from {', '.join(KINDS)}")
    return _BUILDERS[kind](source)


def write(source, kind: str, path, config_hash: str | None = None) -> int:
    """Write plot data for ``kind`` and return the number of data rows."""
    body = rows(source, kind)
    storage.write_csv(path, HEADERS[kind], body, config_hash)
    return len(body)
