"""``qsee`` command line.

::

    qsee run <config.json> [--out DIR] [--seed S] [--paths P] [--override key=value ...]
    qsee sweep <config.json> --grid grid.json [--out DIR] [--seed S] [--paths P] [--override ...]
    qsee sweep <config.json> --axis key=v1,v2 [--axis ...] [--out DIR]
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigurationError
from .harness import EXIT_CONFIG, _parse_value, _report_error, parse_overrides, run, sweep


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsee", description="Quasilinear SEE experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="master seed (noise.seed)")
        sp.add_argument("--paths", type=int, default=None, help="number of paths (n_paths)")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
        if name == "sweep":
            sp.add_argument("--grid", default=None, help="grid file: {key: [values]} or [overrides, ...]")
            sp.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2", help="grid axis")
    return p


def _axes(items: list[str]) -> dict:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"axis {item!r} is not of the form key=v1,v2")
        grid[key.strip()] = [_parse_value(v.strip()) for v in values.split(",") if v.strip()]
    return grid


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "run":
        return run(args.config, args.out, args.seed, args.paths, args.override)
    out = Path(args.out or "qsee_sweep")
    try:
        overrides = parse_overrides(args.override)
        if args.grid is not None:
            grid = json.loads(Path(args.grid).read_text())
        else:
            grid = _axes(args.axis)
    except (ConfigurationError, OSError, json.JSONDecodeError) as exc:
        _report_error(out, exc, EXIT_CONFIG)
        return EXIT_CONFIG
    return sweep(args.config, grid, out, args.seed, args.paths, overrides)


if __name__ == "__main__":
    sys.exit(main())
