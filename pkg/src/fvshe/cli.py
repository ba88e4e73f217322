"""Command-line driver: ``fvshe run``, ``fvshe selftest``, ``fvshe plotdata``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from fvshe import __version__
from fvshe.config import ConfigError, bundled_config_names, config_items, format_config, load_config, parse_overrides
from fvshe.experiment import ExperimentError, execute, read_table_csv
from fvshe.field import Field, write_field_csv
from fvshe.mesh import build_rect_mesh
from fvshe.selftest import FAULTS, run_selftest

log = logging.getLogger("fvshe")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def manifest_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.name + ".manifest.json")


def cmd_run(args) -> int:
    try:
        overrides = parse_overrides(args.set)
        if args.workers is not None:
            overrides["workers"] = str(args.workers)
        cfg, applied = load_config(args.config, overrides)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: invalid config {args.config}:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    if cfg.output_path is None:
        cfg = replace(cfg, output_path=Path(args.config).stem + ".csv")
    started = _now()
    try:
        result = execute(cfg, keep_final=args.dump_final is not None)
    except ExperimentError as exc:
        print(f"error: run failed at realization {exc.realization}, L={exc.L}, N={exc.N}: {exc}",
              file=sys.stderr)
        return 1
    artifacts = {"table": str(cfg.output_path)}
    if args.dump_final is not None:
        artifacts["final_fields"] = _dump_finals(cfg, result.finals, Path(args.dump_final))
    manifest = {
        "tool": "fvshe",
        "version": __version__,
        "config": config_items(cfg),
        "config_text": format_config(cfg),
        "master_seed": cfg.master_seed,
        "overrides": applied,
        "artifacts": artifacts,
        "started": started,
        "finished": _now(),
        "reference_seconds": result.reference_seconds,
    }
    _write_atomic(manifest_path(cfg.output_path), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(result.table.to_csv(), end="")
    return 0


def _dump_finals(cfg, finals, outdir: Path) -> list[str]:
    """Final fields of the first realization, one CSV per run."""
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, values in finals.items():
        if key == "ref":
            L, name = cfg.L_max, f"reference_L{cfg.L_max}_N{cfg.N_max}.csv"
        else:
            L, name = key[0], f"L{key[0]}_N{key[1]}.csv"
        path = outdir / name
        write_field_csv(Field(build_rect_mesh(L, cfg.bbox), values), path)
        written.append(str(path))
    return sorted(written)


def cmd_selftest(args) -> int:
    return 0 if run_selftest(args.inject_fault) else 1


def _slope(x, y):
    if len(x) < 2 or np.ptp(x) == 0:
        return None
    return float(np.polyfit(x, y, 1)[0])


def cmd_plotdata(args) -> int:
    path = Path(args.csv)
    try:
        table = read_table_csv(path)
    except FileNotFoundError:
        print(f"error: no such file: {path}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows = [r for r in table.rows if r.E_hat > 0]
    skipped = len(table.rows) - len(rows)
    outputs = []
    for kind, param in (("time", "N"), ("space", "L")):
        x = np.array([math.log(getattr(r, param)) for r in rows])
        y = np.array([math.log(r.E_hat) for r in rows])
        slope = _slope(x, y)
        lines = [
            f"# log({param}) vs log(E_hat) from {path.name}",
            f"# slope {slope!r}" if slope is not None else "# slope undefined",
        ]
        if skipped:
            lines.append(f"# {skipped} rows with E_hat <= 0 omitted")
        lines.append(f"# L N log_{param} log_E")
        lines += [f"{r.L} {r.N} {xi!r} {yi!r}" for r, xi, yi in zip(rows, x.tolist(), y.tolist())]
        out = path.with_name(f"{path.stem}.{kind}.dat")
        out.write_text("\n".join(lines) + "\n")
        outputs.append(out)
    for out in outputs:
        print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fvshe", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fvshe {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte Carlo error table")
    run.add_argument("--config", required=True,
                     help="config file, or the name of a bundled config: " + ", ".join(bundled_config_names()))
    run.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                     help="override a config value (repeatable)")
    run.add_argument("--workers", type=int, help="number of worker processes")
    run.add_argument("--dump-final", metavar="DIR", help="write final fields of realization 0 as CSV")
    run.set_defaults(func=cmd_run)

    st = sub.add_parser("selftest", help="run the fast invariant checks")
    st.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)
    st.set_defaults(func=cmd_selftest)

    pd = sub.add_parser("plotdata", help="write log-log data files for a result CSV")
    pd.add_argument("csv")
    pd.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
