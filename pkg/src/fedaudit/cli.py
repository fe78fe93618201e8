"""``audit`` command line.

Every experiment flag mirrors a configuration field: ``--rounds`` for a
top-level field, ``--dp.noise_multiplier`` for a field of a section.  A JSON
file given with ``--config`` supplies defaults that flags override, and the
``AUDIT_SEED`` environment variable overrides the root seed.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import plotdata, storage
from .accountant import rdp_curve, rdp_to_eps
from .config import _SECTIONS, ConfigError, ExperimentConfig, apply_env, load, set_dotted
from .experiments import (cmd_ablation, cmd_attack_checkpoint, cmd_monitor, cmd_train,
                          parse_sweep)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
_SKIP_TOP = set(_SECTIONS)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _config_flags(p):
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON file with any subset of the configuration")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in _SKIP_TOP:
            continue
        g.add_argument(f"--{f.name}", dest=f"cfg:{f.name}", default=argparse.SUPPRESS,
                       metavar=f.name.upper())
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            g.add_argument(f"--{section}.{f.name}", dest=f"cfg:{section}.{f.name}",
                           default=argparse.SUPPRESS, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="audit", description="Empirical privacy auditing of simulated DP-FedSGD.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    sp = sub.add_parser("train", help="train and store checkpoints with the theoretical epsilon")
    _config_flags(sp)
    sp = sub.add_parser("monitor", help="train and attack every attack_frequency rounds")
    _config_flags(sp)
    sp = sub.add_parser("attack", help="one canary attack on a frozen checkpoint")
    _config_flags(sp)
    sp.add_argument("--checkpoint", help="parameter blob; default: train for ROUNDS rounds first")
    sp.add_argument("--round-index", type=int, default=None, help="round index for RNG streams")
    sp = sub.add_parser("ablate", help="attack sweeps at a fixed-accuracy checkpoint")
    _config_flags(sp)
    sp.add_argument("--sweep", action="append", required=True,
                    help="NAME=v1,v2,... over pool_size, design_iters, clients_per_round, "
                         "init_strategy, loss_variant, norm_constant (repeatable)")
    sp.add_argument("--repeats", type=int, default=1, help="seeds per grid cell")

    sp = sub.add_parser("accountant", help="epsilon of the subsampled Gaussian mechanism")
    sp.add_argument("--sigma", type=float, required=True)
    sp.add_argument("--q", type=float, required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("--classical", action="store_true", help="use the classical conversion")

    sp = sub.add_parser("plotdata", help="plot-ready CSV from a trace, report or sweep")
    sp.add_argument("--kind", required=True, help=", ".join(plotdata.KINDS))
    sp.add_argument("--input", required=True,
                    help="trace.csv (histogram), report.json (eps-vs-*), ablation.csv (sweep-heatmap)")
    sp.add_argument("--output", required=True)
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for key, value in vars(args).items():
        if key.startswith("cfg:"):
            set_dotted(cfg, key[4:], value)
    apply_env(cfg)
    return cfg.validate()


def _print(obj):
    print(json.dumps(storage.sanitize(obj), indent=2, sort_keys=True))


def _accountant(args):
    if args.sigma < 0 or not 0 <= args.q <= 1 or args.steps < 0 or not 0 < args.delta < 1:
        raise ConfigError("need sigma >= 0, q in [0, 1], steps >= 0 and delta in (0, 1)")
    if args.steps == 0:
        return {"epsilon": 0.0, "best_order": None}
    if args.sigma == 0:
        return {"epsilon": float("inf"), "best_order": None}
    eps, order = rdp_to_eps(rdp_curve(args.sigma, args.q, args.steps), args.delta, args.classical)
    return {"epsilon": eps, "best_order": order}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "accountant":
        _print(_accountant(args))
    elif args.verb == "plotdata":
        try:
            n = plotdata.write(args.input, args.kind, args.output)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        _print({"kind": args.kind, "rows": n, "output": args.output})
    else:
        cfg = resolve_config(args)
        if args.verb == "train":
            _print(cmd_train(cfg))
        elif args.verb == "monitor":
            report = cmd_monitor(cfg)
            _print({"config_hash": report.config_hash, "final_eps_hat": report.final_eps_hat,
                    "final_theoretical_eps": report.final_theoretical_eps,
                    "attacked_rounds": len(report.records), "output_dir": cfg.output_dir})
        elif args.verb == "attack":
            ep = cmd_attack_checkpoint(cfg, args.checkpoint, round_idx=args.round_index)
            _print({"per_round_epsilon": dataclasses.asdict(ep.eps),
                    "score_stats": dataclasses.asdict(ep.stats),
                    "canary_health": ep.canary.health, "output_dir": cfg.output_dir})
        elif args.verb == "ablate":
            rows = cmd_ablation(cfg, parse_sweep(args.sweep), args.repeats)
            _print({"rows": len(rows), "output_dir": cfg.output_dir})
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:
        # argparse exits on --help (0) and on bad usage (2)
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    except ConfigError as exc:
        print(f"audit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        # FloatingPointError and DegenerateGradientError both land here
        print(f"audit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
