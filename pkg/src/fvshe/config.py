"""Flat ``key = value`` experiment config files.

Blank lines and ``#`` comments are ignored. Keys are documented in
``docs/config.md``; lists are comma separated and ``bbox`` is
``x0,x1,y0,y1``. :func:`format_config` writes the normalized form, which
parses back to an identical config.
"""

from __future__ import annotations

import os
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Mapping

from fvshe.experiment import ExperimentConfig
from fvshe.operators import SolverConfig

SEED_ENV = "FVSHE_SEED"

KEY_ORDER = [
    "bbox", "T", "u0", "g", "L_list", "L_max", "N_list", "N_max", "n_realizations", "master_seed",
    "solver.method", "solver.rel_tolerance", "solver.max_iterations", "quadrature_order", "batch_size",
    "workers", "record_timings", "output_path",
]
REQUIRED = {"L_list", "L_max", "N_list", "N_max", "n_realizations"}


class ConfigError(ValueError):
    """Config problems, all of them, collected before giving up."""

    def __init__(self, problems: list[str], source: str = "config"):
        self.problems = list(problems)
        super().__init__(f"{source}: " + "; ".join(self.problems))


def parse_text(text: str, source: str = "config") -> dict[str, str]:
    values: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key = value, got {raw.strip()!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            problems.append(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    if problems:
        raise ConfigError(problems, source)
    return values


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _bbox(s: str):
    v = [float(x) for x in s.split(",")]
    if len(v) != 4:
        raise ValueError("bbox needs four numbers x0,x1,y0,y1")
    return ((v[0], v[1]), (v[2], v[3]))


def _optional_int(s: str):
    return None if s in ("", "none", "None") else int(s)


def _optional_str(s: str):
    return None if s in ("", "none", "None") else s


CONVERTERS = {
    "bbox": _bbox,
    "T": float,
    "u0": str,
    "g": str,
    "L_list": _ints,
    "L_max": int,
    "N_list": _ints,
    "N_max": int,
    "n_realizations": int,
    "master_seed": int,
    "solver.method": str,
    "solver.rel_tolerance": float,
    "solver.max_iterations": _optional_int,
    "quadrature_order": int,
    "batch_size": int,
    "workers": int,
    "record_timings": _bool,
    "output_path": _optional_str,
}


def build_config(values: Mapping[str, str], source: str = "config") -> ExperimentConfig:
    """Convert raw strings into a validated config, reporting every problem."""
    problems = []
    typed = {}
    for key, raw in values.items():
        conv = CONVERTERS.get(key)
        if conv is None:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            typed[key] = conv(raw)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    for key in sorted(REQUIRED - set(values)):
        problems.append(f"missing required key {key!r}")
    if problems:
        raise ConfigError(problems, source)

    defaults = SolverConfig(method="cholesky")
    try:
        solver = SolverConfig(
            method=typed.pop("solver.method", defaults.method),
            rel_tolerance=typed.pop("solver.rel_tolerance", defaults.rel_tolerance),
            max_iterations=typed.pop("solver.max_iterations", defaults.max_iterations),
        )
    except ValueError as exc:
        problems.append(f"solver: {exc}")
        solver = defaults
        for key in ("solver.method", "solver.rel_tolerance", "solver.max_iterations"):
            typed.pop(key, None)
    cfg = ExperimentConfig(solver=solver, **typed)
    problems += cfg.problems()
    if problems:
        raise ConfigError(problems, source)
    return cfg


def _num(v) -> str:
    return repr(float(v))


def config_items(cfg: ExperimentConfig) -> dict[str, str]:
    (x0, x1), (y0, y1) = cfg.bbox
    mi = cfg.solver.max_iterations
    return {
        "bbox": ",".join(_num(v) for v in (x0, x1, y0, y1)),
        "T": _num(cfg.T),
        "u0": cfg.u0,
        "g": cfg.g,
        "L_list": ",".join(str(v) for v in cfg.L_list),
        "L_max": str(cfg.L_max),
        "N_list": ",".join(str(v) for v in cfg.N_list),
        "N_max": str(cfg.N_max),
        "n_realizations": str(cfg.n_realizations),
        "master_seed": str(cfg.master_seed),
        "solver.method": cfg.solver.method,
        "solver.rel_tolerance": _num(cfg.solver.rel_tolerance),
        "solver.max_iterations": "" if mi is None else str(mi),
        "quadrature_order": str(cfg.quadrature_order),
        "batch_size": str(cfg.batch_size),
        "workers": str(cfg.workers),
        "record_timings": "true" if cfg.record_timings else "false",
        "output_path": cfg.output_path or "",
    }


def format_config(cfg: ExperimentConfig) -> str:
    items = config_items(cfg)
    return "".join(f"{k} = {items[k]}\n" for k in KEY_ORDER)


def parse_config(text: str, source: str = "config") -> ExperimentConfig:
    return build_config(parse_text(text, source), source)


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    problems = []
    for pair in pairs or ():
        if "=" not in pair:
            problems.append(f"override {pair!r} is not key=value")
            continue
        k, v = (s.strip() for s in pair.split("=", 1))
        out[k] = v
    if problems:
        raise ConfigError(problems, "--set")
    return out


def bundled_config_names() -> list[str]:
    root = resources.files("fvshe") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".cfg"))


def locate_config(path: str) -> Path:
    """The file at ``path``, or a bundled config of that name."""
    p = Path(path)
    if p.exists():
        return p
    if p.name == str(path) and path in bundled_config_names():
        return Path(str(resources.files("fvshe") / "configs" / path))
    raise FileNotFoundError(f"config file not found: {path}")


def load_config(path: str, overrides: Mapping[str, str] | None = None,
                env: Mapping[str, str] | None = None) -> tuple[ExperimentConfig, dict[str, str]]:
    """Read a config and apply overrides.

    Precedence, lowest first: file values, the ``FVSHE_SEED`` environment
    variable (master_seed only), ``--set`` overrides. Returns the config and
    the overrides actually applied.
    """
    located = locate_config(path)
    values = parse_text(located.read_text(), str(path))
    applied = {}
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        values["master_seed"] = applied["master_seed"] = env[SEED_ENV].strip()
    for k, v in (overrides or {}).items():
        values[k] = applied[k] = v
    return build_config(values, str(path)), applied


def with_output(cfg: ExperimentConfig, output_path) -> ExperimentConfig:
    return replace(cfg, output_path=None if output_path is None else str(output_path))
