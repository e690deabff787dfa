"""Command-line entry point: ``run``, ``sweep-beta``, ``cost-report``, ``dp-budget``.

Every config field is also a flag of the same name (``--beta 0.3``,
``--pretrain_rounds 20``); flags win over ``--config`` file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing

import numpy as np

from . import experiment, privacy, protocol
from .config import ConfigError, ExperimentConfig, parse_config
from .costs import CostInputs, cost_table
from .data import IdxFormatError

log = logging.getLogger("feddpms")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    hints = typing.get_type_hints(ExperimentConfig)
    group = p.add_argument_group("config fields")
    for f in dataclasses.fields(ExperimentConfig):
        hint = hints[f.name]
        kwargs: dict = {"default": None, "dest": f.name}
        if hint is bool:
            kwargs["type"] = _parse_bool
        elif hint == list[int]:
            kwargs.update(type=int, nargs="+")
        elif int in typing.get_args(hint) or hint is int:
            kwargs["type"] = int
        elif float in typing.get_args(hint) or hint is float:
            kwargs["type"] = float
        else:
            kwargs["type"] = str
        group.add_argument(f"--{f.name}", **kwargs)


def _config_from(args) -> ExperimentConfig:
    names = [f.name for f in dataclasses.fields(ExperimentConfig)]
    return parse_config(args.config, {k: getattr(args, k) for k in names})


def _dump(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=float)
    sys.stdout.write("\n")


def cmd_run(args) -> int:
    cfg = _config_from(args)
    runs, mean_acc = experiment.run_trials(cfg, write=not args.no_write)
    out = {"mean_final_accuracy": mean_acc, "runs": [m.summary() for m in runs]}
    if not args.verbose_summary:
        for r in out["runs"]:
            r.pop("config")
    _dump(out)
    return 0


def cmd_sweep_beta(args) -> int:
    cfg = _config_from(args)
    seeds = args.seeds if args.seeds else list(range(cfg.seed, cfg.seed + cfg.trials))
    table = experiment.sweep_beta(cfg, args.betas, tuple(args.schemes), tuple(seeds), write=not args.no_write)
    _dump({f"{b:g}": row for b, row in table.items()})
    return 0


def _theta_for(cfg: ExperimentConfig) -> tuple[int, int]:
    if cfg.dataset == "idx":
        parts, _ = experiment.prepare(cfg)
        dim, classes = parts[0].dim, parts[0].num_classes
    else:
        dim, classes = cfg.synthetic_dim, cfg.synthetic_classes
    arch = protocol.arch_for(cfg, dim, classes)
    init = protocol.vae.init_model(arch, np.random.default_rng(0))
    return init.enc.count + init.clf.count, dim


def cmd_cost_report(args) -> int:
    cfg = _config_from(args)
    theta, dim = _theta_for(cfg)
    if args.theta is not None:
        theta = args.theta
    inputs = CostInputs(theta=theta, latent_dim=cfg.latent_dim, n=cfg.n, alpha=cfg.alpha,
                        k=cfg.clients_per_round, K=cfg.clients, T=cfg.rounds, T_p=cfg.pretrain_rounds, G=dim)
    out = {"inputs": dataclasses.asdict(inputs), "table": cost_table(inputs)}
    if args.measure:
        m = experiment.run_experiment(dataclasses.replace(cfg, scheme="feddpms"), write=not args.no_write)
        out["measured"] = m.cost_report
    _dump(out)
    return 0


def cmd_dp_budget(args) -> int:
    if args.calibrate:
        eps, delta = args.calibrate
        sigma = privacy.calibrate_sigma(eps, delta)
        _dump({"epsilon": eps, "delta": delta, "sigma_mech": sigma,
               "noise_std": {str(m): sigma / m for m in args.m}})
        return 0
    rows = privacy.budget_report(args.noise_std, {i: m for i, m in enumerate(args.m)},
                                 epsilon=args.epsilon, delta=args.delta, min_m=args.min_m)
    _dump([r.to_dict() for r in rows])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddpms", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one config for cfg.trials seeds")
    _add_config_flags(p)
    p.add_argument("--no-write", action="store_true", help="skip CSV/JSON output")
    p.add_argument("--verbose-summary", action="store_true", help="include the full config per run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-beta", help="mean final accuracy per (beta, scheme)")
    _add_config_flags(p)
    p.add_argument("--betas", type=float, nargs="+", default=[0.1, 0.3, 0.5])
    p.add_argument("--schemes", nargs="+", default=["feddpms", "fedavg"])
    p.add_argument("--seeds", type=int, nargs="+", help="default: seed .. seed+trials-1")
    p.add_argument("--no-write", action="store_true")
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("cost-report", help="closed-form overhead table, optionally reconciled with a run")
    _add_config_flags(p)
    p.add_argument("--theta", type=int, help="override the encoder+classifier parameter count")
    p.add_argument("--measure", action="store_true", help="also run feddpms and report counted traffic")
    p.add_argument("--no-write", action="store_true")
    p.set_defaults(func=cmd_cost_report)

    p = sub.add_parser("dp-budget", help="privacy parameters implied by a noise level")
    p.add_argument("--noise_std", type=float, default=ExperimentConfig.noise_std)
    p.add_argument("--m", type=int, nargs="+", default=[100], help="samples behind each released mean")
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--min_m", type=int, default=1)
    p.add_argument("--calibrate", type=float, nargs=2, metavar=("EPSILON", "DELTA"),
                   help="print the smallest mechanism multiplier for (epsilon, delta)")
    p.set_defaults(func=cmd_dp_budget)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IdxFormatError, privacy.PrivacyFloorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
