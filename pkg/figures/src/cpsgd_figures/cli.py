"""Figure CLI.

    cpsgd-plot plot --traces a.csv:LabelA b.csv:LabelB \
        --x round|bits --y residual --logy --out fig.png
"""

from __future__ import annotations

import argparse
import os
import sys

from .plotting import EmptyTrace, PlotSpec, SchemaMismatch, render


def _parse_trace_arg(arg: str) -> tuple[str, str]:
    path, sep, label = arg.rpartition(":")
    if not sep or not path:
        stem = os.path.splitext(os.path.basename(arg))[0]
        return arg, stem
    return path, label


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpsgd-plot",
                                     description="render trace figures")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("plot", help="plot one or more traces")
    p.add_argument("--traces", nargs="+", required=True,
                   metavar="CSV[:LABEL]")
    p.add_argument("--x", choices=("round", "bits"), default="round")
    p.add_argument("--y", default="residual")
    p.add_argument("--logy", action="store_true", default=True)
    p.add_argument("--linear-y", dest="logy", action="store_false",
                   help="disable the default log y-axis")
    p.add_argument("--logx", action="store_true")
    p.add_argument("--title", default=None)
    p.add_argument("--no-downsample", dest="downsample", action="store_false")
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    spec = PlotSpec(
        traces=tuple(_parse_trace_arg(a) for a in args.traces),
        out_path=args.out,
        x_axis=args.x,
        y_column=args.y,
        logy=args.logy,
        logx=args.logx,
        title=args.title,
        downsample=args.downsample,
    )
    try:
        path = render(spec)
    except (SchemaMismatch, EmptyTrace, OSError) as exc:
        print(f"plot error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
