"""Command line entry point: render figure panels from result tables."""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .figures import PANEL_KINDS, FigureSpec, SchemaError, panel_columns, render

EPILOG = """\
Panels: welfare (social welfare and per-side utility vs user count),
overhead (runtime, interaction count, delay, energy vs user count,
log scale), demand (booked demand share vs overbooking rate),
defaults (default-rate bars per strategy and user count),
summary (per-strategy metric-mean table).

With --panels auto, every panel whose columns appear in all input
tables is rendered; explicitly requested panels fail with the missing
column named. Exit codes: 0 ok, 2 bad input.
"""


def _table_columns(path: str) -> list[str]:
    with open(path, newline="") as fh:
        return csv.DictReader(fh).fieldnames or []


def _auto_panels(tables: tuple[str, ...]) -> list[str]:
    headers = [set(_table_columns(path)) for path in tables]
    picked = []
    for panel in PANEL_KINDS:
        needed = set(panel_columns(panel))
        if all(needed <= header for header in headers):
            picked.append(panel)
    return picked


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="isacfigs",
        description="Render figure panels from trading result tables.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--results", nargs="+", required=True, metavar="FILE",
        help="results CSV table(s), concatenated before plotting",
    )
    parser.add_argument("--out-dir", required=True, help="directory for rendered images")
    parser.add_argument(
        "--panels", default="auto",
        help="comma list from {%s}, or 'auto' (default)" % ",".join(PANEL_KINDS),
    )
    parser.add_argument(
        "--strategies", default="",
        help="comma list restricting which strategies are drawn (default: all present)",
    )
    parser.add_argument(
        "--format", default="svg", choices=("svg", "png"), help="image format (default svg)",
    )
    args = parser.parse_args(argv)

    tables = tuple(args.results)
    strategies = tuple(s for s in args.strategies.split(",") if s)
    try:
        if args.panels == "auto":
            panels = _auto_panels(tables)
            if not panels:
                raise SchemaError(f"{tables[0]}: no panel's columns are all present")
        else:
            panels = [p for p in args.panels.split(",") if p]
            unknown = [p for p in panels if p not in PANEL_KINDS]
            if unknown:
                parser.error(f"unknown panel(s): {', '.join(unknown)}")
        for panel in panels:
            spec = FigureSpec(
                tables=tables,
                panel=panel,
                out_path=os.path.join(args.out_dir, f"{panel}.{args.format}"),
                strategies=strategies,
            )
            print(render(spec))
    except (OSError, SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
