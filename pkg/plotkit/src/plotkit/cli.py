"""plot_variance command line entry point."""

import argparse
import sys

from .jobs import PlotJob, SchemaError
from .render import PLOT_KINDS, render


def parse_inputs(items):
    """Each input is 'path:Label'; a bare path uses the filename as label."""
    inputs = []
    for item in items:
        path, sep, label = item.rpartition(":")
        if not sep or not path:
            path, label = item, item
        inputs.append((path, label))
    return inputs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plot_variance",
        description="Render training-variance plots from metrics CSVs")
    parser.add_argument("--inputs", nargs="+", required=True,
                        metavar="CSV:LABEL",
                        help="labeled input CSVs, e.g. a.csv:Baseline b.csv:E2PO")
    parser.add_argument("--kind", required=True, choices=PLOT_KINDS)
    parser.add_argument("--out", required=True, help="output image path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = PlotJob(inputs=parse_inputs(args.inputs), out_path=args.out,
                  kind=args.kind)
    try:
        render(job)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
