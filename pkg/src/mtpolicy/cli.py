"""Command-line driver: train, evaluate, baseline, report.

Config files are JSON with the documented schema (see README); every
command is fully seeded and reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _parse_grid(spec: str):
    try:
        lo, hi, step = (float(p) for p in spec.split(":"))
    except ValueError as exc:
        raise SystemExit(f"bad grid spec {spec!r}; expected lo:hi:step") from exc
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 10)


def _load_config(path: str, seed: int | None, out: str | None):
    from . import harness

    config = harness.load_config(path)
    if seed is not None:
        import dataclasses

        config = dataclasses.replace(config, seed=seed)
    if out is not None:
        import dataclasses

        config = dataclasses.replace(config, out_dir=out)
    return config.validate()


def cmd_train(args) -> int:
    from . import harness

    config = _load_config(args.config, args.seed, args.out)
    out_dir = config.out_dir or "run"
    state = harness.run_training(config, out_dir)
    print(f"trained {state.iteration} iterations; state in {out_dir}/state.json")
    return 0


def cmd_evaluate(args) -> int:
    from . import harness, policy as policy_mod

    state = harness.load_run(os.path.join(args.run, "state.json"))
    config = state.config
    etas = _parse_grid(args.grid) if args.grid else None
    if args.checkpoint == "best":
        _, pol = harness.select_best_checkpoint(args.run, config)
    else:
        pol = policy_mod.unpack(state.theta, config.policy_shape())
    table = harness.evaluate(
        pol, config, mode="joint", etas=etas,
        rollouts=args.rollouts, label="joint",
    )
    out_path = args.out or os.path.join(args.run, "eval_joint.csv")
    with open(out_path, "w") as fh:
        fh.write(table.to_csv())
    print(f"grand mean {table.grand_mean!r} over {len(table.rows)} test tasks -> {out_path}")
    return 0


def cmd_baseline(args) -> int:
    import dataclasses

    from . import harness

    config = _load_config(args.config, args.seed, args.out)
    if args.kappa is not None:
        config = dataclasses.replace(config, kappa=args.kappa).validate()
    out_dir = config.out_dir or "baseline_run"
    os.makedirs(out_dir, exist_ok=True)
    from . import baselines

    bank_path = os.path.join(out_dir, "bank", "bank.json")
    if os.path.exists(bank_path) and not args.retrain:
        with open(bank_path) as fh:
            bank = baselines.from_json(fh.read())
        bank = baselines.LocalPolicyBank(bank.entries, kappa=config.kappa)
    else:
        bank = harness.train_local_bank(config, os.path.join(out_dir, "bank"))
    etas = _parse_grid(args.grid) if args.grid else None
    table = harness.evaluate(bank, config, mode=args.mode, etas=etas, rollouts=args.rollouts)
    out_path = os.path.join(out_dir, f"eval_{args.mode}.csv")
    with open(out_path, "w") as fh:
        fh.write(table.to_csv())
    print(f"{args.mode} grand mean {table.grand_mean!r} -> {out_path}")
    return 0


def cmd_report(args) -> int:
    from . import harness

    state = harness.write_report(args.run)
    config = state.config
    summary = {
        "schema_version": harness.SCHEMA_VERSION,
        "seed": config.seed,
        "iterations": state.iteration,
        "grand_means": {},
        "runtimes": {},
    }
    for name in sorted(os.listdir(args.run)):
        if name.startswith("eval_") and name.endswith(".csv"):
            label = name[len("eval_") : -len(".csv")]
            with open(os.path.join(args.run, name)) as fh:
                rows = fh.read().strip().splitlines()[1:]
            means = [float(r.split(",")[1]) for r in rows]
            summary["grand_means"][label] = float(np.mean(means))
    path = os.path.join(args.run, "summary.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    print(f"report written to {args.run} (summary.json, learning_curve.csv, policy_slice.csv)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtpolicy",
        description="Model-based multi-task policy search on the cart-pole benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained run on a test grid")
    p.add_argument("--run", required=True)
    p.add_argument("--grid", default=None, help="lo:hi:step (default: config grid)")
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--checkpoint", choices=("final", "best"), default="final")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="train/evaluate the local-controller bank")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("nn", "gating"), required=True)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--grid", default=None)
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--retrain", action="store_true")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="emit CSV tables and summary for a run dir")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
