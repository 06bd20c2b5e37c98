"""Command-line interface.

    cpsgd run    --config cfg.json [--out DIR] [--seeds 1,2,3] [--lyapunov]
    cpsgd sweep  --config cfg.json --agents 2,4,8 --rounds T [--beta2 B]
    cpsgd oracle --config cfg.json [--out DIR]

Exit codes: 0 success, 1 partial failures, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .harness import (
    ParseError,
    ValidationError,
    build_problem,
    compute_reference,
    load_config,
    run_experiment,
    speedup_sweep,
    _resolve_out_dir,
)


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpsgd",
        description="Compressed primal-dual SGD simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every (algorithm, seed) pair")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seeds", default=None, help="comma-separated override")
    p_run.add_argument("--lyapunov", action="store_true", default=None)

    p_sweep = sub.add_parser("sweep", help="agent-count speedup sweep")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--agents", required=True, help="comma-separated counts")
    p_sweep.add_argument("--rounds", required=True, type=int)
    p_sweep.add_argument("--beta1", type=float, default=1.0)
    p_sweep.add_argument("--beta2", type=float, default=0.05)
    p_sweep.add_argument("--alpha-x", type=float, default=0.2)
    p_sweep.add_argument("--out", default=None)

    p_oracle = sub.add_parser("oracle", help="compute and cache the reference optimum")
    p_oracle.add_argument("--config", required=True)
    p_oracle.add_argument("--out", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
    except (ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "run":
        seeds = tuple(_parse_int_list(args.seeds)) if args.seeds else None
        if seeds is not None and not seeds:
            print("config error: empty --seeds override", file=sys.stderr)
            return 2
        result = run_experiment(
            config, out_dir=args.out, seeds=seeds, lyapunov=args.lyapunov
        )
        for path in result.trace_paths:
            print(f"wrote {path}")
        for failure in result.failures:
            print(
                f"FAILED {failure['algorithm']} seed {failure['seed']}: "
                f"{failure['error']}",
                file=sys.stderr,
            )
        return 1 if result.failures else 0

    if args.command == "sweep":
        agents = _parse_int_list(args.agents)
        try:
            summary = speedup_sweep(
                config,
                agent_counts=agents,
                rounds=args.rounds,
                beta2=args.beta2,
                beta1=args.beta1,
                alpha_x=args.alpha_x,
                out_dir=args.out,
            )
        except ValidationError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        print(json.dumps(summary["rows"], indent=2))
        for warning in summary["warnings"]:
            print(f"warning: {warning}", file=sys.stderr)
        return 0

    # oracle
    out = _resolve_out_dir(config, args.out)
    os.makedirs(out, exist_ok=True)
    for seed in config.seeds:
        problem = build_problem(config, seed)
        cache = os.path.join(out, f"reference_seed{seed}.json")
        x_star, f_star = compute_reference(problem, cache_path=cache)
        print(f"seed {seed}: f_star={f_star!r} cached at {cache}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
