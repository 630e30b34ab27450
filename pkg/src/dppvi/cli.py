"""Command line entry point: ``dppvi run | sweep | replay | epsilon-table``.

Exit codes: 0 success, 2 configuration error, 3 a seed still diverged after
the allowed reruns (or a replay mismatch).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import CalibrationFailed, ConfigError, DomainError, IoError, SchemaMismatch
from .harness import EPSILON_PRESETS, ExperimentConfig, replay, run_experiment, sweep
from .privacy import accountant_epsilon, calibrate_sigma

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
CONFIG_ERRORS = (ConfigError, SchemaMismatch, IoError, DomainError, CalibrationFailed)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    """Flag values layered over the config file."""
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key] = _parse_value(value)
    direct = {
        "method": args.method, "seed": args.seed, "repeats": args.repeats, "output": args.out,
        "local_partitions": args.local_partitions, "aggregator": args.aggregator,
        "split.M": args.clients, "schedule.kind": args.schedule, "schedule.global_updates": args.global_updates,
        "schedule.damping": args.damping, "optimizer.lr": args.lr, "optimizer.local_steps": args.local_steps,
        "optimizer.batch_size": args.batch_size, "dp.epsilon": args.epsilon, "dp.delta": args.delta,
        "dp.noise_multiplier": args.sigma, "dp.clip_norm": args.clip_norm,
    }
    out.update({k: v for k, v in direct.items() if v is not None})
    return out


def _build_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    for key, value in _overrides(args).items():
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(doc)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--method")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--local-partitions", type=int)
    p.add_argument("--aggregator", choices=["none", "trusted"])
    p.add_argument("--schedule", choices=["sequential", "synchronous"])
    p.add_argument("--global-updates", type=int)
    p.add_argument("--damping", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--local-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--sigma", type=float, help="explicit noise multiplier instead of --epsilon")
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, JSON value")


def _summary(report) -> str:
    ll, acc = report.mean.get("mean_loglik"), report.mean.get("accuracy")
    parts = [f"method={report.method}", f"seeds={len(report.per_seed)}"]
    if ll is not None:
        parts.append(f"mean_loglik={ll:.4f}")
    if acc is not None:
        parts.append(f"accuracy={acc:.4f}")
    parts.append(f"communications={report.communications}")
    if report.epsilon_max is not None:
        parts.append(f"epsilon_max={report.epsilon_max:.4f}")
    return " ".join(parts)


def cmd_run(args) -> int:
    report = run_experiment(_build_config(args))
    print(_summary(report))
    if report.diverged:
        for r in report.per_seed:
            if r.status != "ok":
                print(f"seed {r.seed} diverged after {r.reruns} reruns: {r.error}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        grid = json.loads(Path(args.grid).read_text()) if Path(args.grid).exists() else json.loads(args.grid)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid is neither a file nor JSON: {exc}") from exc
    result = sweep(_build_config(args), grid)
    for point, rep, err in zip(result.points, result.reports, result.errors):
        print(json.dumps(point), "error: " + err if err else _summary(rep))
    print("selection:", json.dumps(result.selection))
    return EXIT_OK


def cmd_replay(args) -> int:
    result = replay(args.trace)
    if result.ok:
        print("replay ok: every recorded number reproduced")
        return EXIT_OK
    for m in result.mismatches:
        print(m, file=sys.stderr)
    return EXIT_DIVERGED


def cmd_epsilon_table(args) -> int:
    if args.sigma:
        print("steps,q,sigma,delta,epsilon")
        for t in args.steps:
            for s in args.sigma:
                print(f"{t},{args.q},{s},{args.delta},{accountant_epsilon(args.delta, args.q, t, s):.6g}")
        return EXIT_OK
    print("steps,q,delta,target_epsilon,noise_multiplier,achieved_epsilon")
    for t in args.steps:
        for eps in args.epsilon or EPSILON_PRESETS:
            sigma = calibrate_sigma(eps, args.delta, args.q, t)
            achieved = accountant_epsilon(args.delta, args.q, t, sigma)
            print(f"{t},{args.q},{args.delta},{eps},{sigma:.6g},{achieved:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dppvi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one experiment over its seeds")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="single-seed grid search")
    _add_config_flags(p)
    p.add_argument("--grid", required=True, help='JSON file or literal, e.g. {"optimizer.lr": [0.01, 0.05]}')
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("replay", help="re-execute a trace and verify every number")
    p.add_argument("trace")
    p.set_defaults(func=cmd_replay)
    p = sub.add_parser("epsilon-table", help="noise multipliers for epsilon presets, or epsilons for given sigmas")
    p.add_argument("--steps", type=int, nargs="+", default=[1, 10, 100])
    p.add_argument("--q", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--epsilon", type=float, nargs="+")
    p.add_argument("--sigma", type=float, nargs="+")
    p.set_defaults(func=cmd_epsilon_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
