"""Monte Carlo strong-error studies on coupled Brownian paths.

For every realization one fine path with ``N_max`` increments is drawn. The
reference solution runs on the ``L_max`` grid with the fine path, every
candidate (L, N) runs on its own grid with the path summed down to N steps,
and the exact squared L2 distance between the two final fields is recorded.
All runs of a realization advance in lockstep through blocks of the fine
path, so the path is never stored in full and the reference is computed
once per realization however many (L, N) cells are requested.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from fvshe.field import (
    CrossMeshIntegrator,
    cell_average_project,
    centered_project,
    eigenvalue,
    neumann_eigenfunction,
    resolve_function,
)
from fvshe.mesh import build_rect_mesh
from fvshe.operators import SolverConfig, StepSolver, assemble_stiffness
from fvshe.sde import SimulationError, advance, block_sums, realization_generator, resolve_noise, zero_noise

log = logging.getLogger(__name__)

CSV_HEADER = ["L", "N", "Np", "E_hat", "std_err", "order_time", "order_space", "wall_seconds"]
MAX_BLOCK = 4096


class ExperimentError(RuntimeError):
    """A realization failed; carries the (realization, L, N) that broke."""

    def __init__(self, message, realization=None, L=None, N=None):
        super().__init__(message)
        self.realization = realization
        self.L = L
        self.N = N


@dataclass(frozen=True)
class ExperimentConfig:
    L_list: tuple[int, ...]
    L_max: int
    N_list: tuple[int, ...]
    N_max: int
    n_realizations: int
    master_seed: int = 0
    bbox: tuple[tuple[float, float], tuple[float, float]] = ((-1.0, 1.0), (-1.0, 1.0))
    T: float = 1.0
    u0: str = "paper-poly"
    g: str = "sqrt-one-plus-sq"
    solver: SolverConfig = SolverConfig(method="cholesky")
    quadrature_order: int = 4
    batch_size: int = 500
    workers: int = 1
    record_timings: bool = False
    output_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "L_list", tuple(int(v) for v in self.L_list))
        object.__setattr__(self, "N_list", tuple(int(v) for v in self.N_list))
        object.__setattr__(self, "bbox", tuple(tuple(float(v) for v in s) for s in self.bbox))

    def problems(self) -> list[str]:
        """Every violated invariant, as readable messages."""
        out = []
        if not self.L_list:
            out.append("L_list is empty")
        if not self.N_list:
            out.append("N_list is empty")
        if self.L_max < 1:
            out.append(f"L_max must be >= 1, got {self.L_max}")
        if self.N_max < 1:
            out.append(f"N_max must be >= 1, got {self.N_max}")
        for L in self.L_list:
            if L < 1:
                out.append(f"L={L} must be >= 1")
            elif L > self.L_max:
                out.append(f"L={L} exceeds L_max={self.L_max}")
        for N in self.N_list:
            if N < 1:
                out.append(f"N={N} must be >= 1")
            elif self.N_max >= 1 and self.N_max % N:
                out.append(f"N={N} does not divide N_max={self.N_max}")
        if len(set(self.L_list)) != len(self.L_list):
            out.append("L_list has duplicates")
        if len(set(self.N_list)) != len(self.N_list):
            out.append("N_list has duplicates")
        if self.n_realizations < 1:
            out.append(f"n_realizations must be >= 1, got {self.n_realizations}")
        if self.master_seed < 0:
            out.append(f"master_seed must be >= 0, got {self.master_seed}")
        if not self.T > 0:
            out.append(f"T must be positive, got {self.T}")
        if self.quadrature_order < 1:
            out.append(f"quadrature_order must be >= 1, got {self.quadrature_order}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.workers < 1:
            out.append(f"workers must be >= 1, got {self.workers}")
        if len(self.bbox) != 2 or any(len(s) != 2 or not s[1] > s[0] for s in self.bbox):
            out.append(f"bbox {self.bbox} is degenerate")
        for key, resolver in (("u0", lambda v: resolve_function(v, self.bbox)), ("g", resolve_noise)):
            try:
                resolver(getattr(self, key))
            except ValueError as exc:
                out.append(f"{key}: {exc}")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ValueError("invalid experiment config:\n  " + "\n  ".join(problems))
        return self

    def cells(self) -> list[tuple[int, int]]:
        """(L, N) pairs in table order: L outer, N inner, both ascending."""
        return [(L, N) for L in sorted(self.L_list) for N in sorted(self.N_list)]


@dataclass(frozen=True)
class ErrorRow:
    L: int
    N: int
    Np: int
    E_hat: float
    std_err: float
    order_time: float | None = None
    order_space: float | None = None
    wall_seconds: float | None = None


@dataclass(frozen=True)
class ErrorTable:
    rows: tuple[ErrorRow, ...]
    quantity: Literal["squared_l2", "l2"] = "squared_l2"

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.L, r.N, r.Np, _fmt(r.E_hat), _fmt(r.std_err), _fmt(r.order_time),
                             _fmt(r.order_space), _fmt(r.wall_seconds)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_csv())
        tmp.replace(path)


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def read_table_csv(path) -> ErrorTable:
    """Parse a CSV written by :meth:`ErrorTable.write_csv`.

    Raises ``ValueError`` naming the offending line for malformed input.
    """
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError(f"{path}: empty file")
    if rows[0] != CSV_HEADER:
        raise ValueError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} columns, got {len(row)}")
        opt = lambda s: None if s == "" else float(s)  # noqa: E731
        try:
            out.append(ErrorRow(L=int(row[0]), N=int(row[1]), Np=int(row[2]), E_hat=float(row[3]),
                                std_err=float(row[4]), order_time=opt(row[5]), order_space=opt(row[6]),
                                wall_seconds=opt(row[7])))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
    if not out:
        raise ValueError(f"{path}: no data rows")
    return ErrorTable(tuple(out))


def _order(e_prev, e_curr, p_prev, p_curr):
    if not (e_prev > 0 and e_curr > 0):
        return None
    return math.log(e_prev / e_curr) / math.log(p_curr / p_prev)


def _groups(table: ErrorTable, varying: str):
    key, param = ("L", "N") if varying == "time" else ("N", "L")
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(table.rows):
        groups.setdefault(getattr(r, key), []).append(i)
    return groups, param


def fit_orders(table: ErrorTable, varying: Literal["time", "space"]) -> ErrorTable:
    """Attach consecutive convergence orders log(E_prev/E)/log(p/p_prev).

    Rows are grouped by the fixed parameter (L for ``time``, N for ``space``)
    and, within a group, taken in table order, which must be strictly
    monotone in the varying parameter.
    """
    if varying not in ("time", "space"):
        raise ValueError(f"varying must be 'time' or 'space', got {varying!r}")
    groups, param = _groups(table, varying)
    if not any(len(idx) >= 2 for idx in groups.values()):
        raise ValueError(f"no two rows vary {param} with the other parameter fixed")
    attr = "order_time" if varying == "time" else "order_space"
    rows = list(table.rows)
    for idx in groups.values():
        ps = [getattr(rows[i], param) for i in idx]
        steps = np.sign(np.diff(ps))
        if len(ps) > 1 and not (np.all(steps > 0) or np.all(steps < 0)):
            raise ValueError(f"{param} sequence {ps} is not strictly monotone")
        rows[idx[0]] = replace(rows[idx[0]], **{attr: None})
        for a, b in zip(idx, idx[1:]):
            ra, rb = rows[a], rows[b]
            rows[b] = replace(rb, **{attr: _order(ra.E_hat, rb.E_hat, getattr(ra, param), getattr(rb, param))})
    return replace(table, rows=tuple(rows))


def _has_pairs(table: ErrorTable, varying: str) -> bool:
    groups, _ = _groups(table, varying)
    return any(len(idx) >= 2 for idx in groups.values())


def least_squares_order(params: Sequence[float], errors: Sequence[float]) -> float:
    """Slope of -log(error) against log(param), a single fitted order for a whole sequence."""
    x = np.log(np.asarray(params, dtype=float))
    y = -np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def block_length(N_max: int, N_list: Iterable[int]) -> int:
    """Fine steps per lockstep block: a multiple of every coarsening ratio."""
    block = 1
    for N in N_list:
        block = math.lcm(block, N_max // N)
    while N_max % (2 * block) == 0 and 2 * block <= MAX_BLOCK:
        block *= 2
    return block


@dataclass
class _Run:
    L: int
    N: int
    solver: StepSolver | None
    seconds: float = 0.0


class _Engine:
    """Meshes, factorisations and initial fields shared by all realizations."""

    def __init__(self, cfg: ExperimentConfig, cells: Sequence[tuple[int, int]]):
        self.cfg = cfg
        self.cells = list(cells)
        self.noise = resolve_noise(cfg.g)
        u0 = resolve_function(cfg.u0, cfg.bbox)
        self.meshes = {}
        self.u0 = {}
        solvers = {}
        for L in {cfg.L_max, *(L for L, _ in self.cells)}:
            mesh = build_rect_mesh(L, cfg.bbox)
            self.meshes[L] = mesh
            self.u0[L] = cell_average_project(u0, mesh, cfg.quadrature_order).values
            A = assemble_stiffness(mesh)
            for N in {cfg.N_max, *(N for L2, N in self.cells if L2 == L)}:
                solvers[L, N] = StepSolver(mesh.measures, cfg.T / N, A, cfg.solver)
        self.ref = _Run(cfg.L_max, cfg.N_max, solvers[cfg.L_max, cfg.N_max])
        self.runs = [
            _Run(L, N, None if (L, N) == (cfg.L_max, cfg.N_max) else solvers[L, N]) for L, N in self.cells
        ]
        ref_mesh = self.meshes[cfg.L_max]
        self.integrators = {L: CrossMeshIntegrator(ref_mesh, self.meshes[L]) for L, _ in self.cells}
        self.block = block_length(cfg.N_max, [N for _, N in self.cells])

    def run(self, realizations: Sequence[int], keep_final: bool = False):
        """Squared errors of shape (len(realizations), len(cells))."""
        cfg = self.cfg
        realizations = list(realizations)
        gens = [realization_generator(cfg.master_seed, l) for l in realizations]
        b = len(realizations)
        scale = math.sqrt(cfg.T / cfg.N_max)
        ref_state = np.tile(self.ref_u0, (b, 1))
        states = [None if run.solver is None else np.tile(self.u0[run.L], (b, 1)) for run in self.runs]
        ref_mass = self.meshes[cfg.L_max].measures
        for start in range(0, cfg.N_max, self.block):
            dw = np.stack([gen.standard_normal(self.block) for gen in gens]) * scale
            t0 = time.perf_counter()
            ref_state = self._advance(self.ref, ref_mass, ref_state, dw, start, realizations)
            self.ref.seconds += time.perf_counter() - t0
            for i, run in enumerate(self.runs):
                if run.solver is None:
                    continue
                t0 = time.perf_counter()
                ratio = cfg.N_max // run.N
                states[i] = self._advance(run, self.meshes[run.L].measures, states[i], block_sums(dw, ratio),
                                          start // ratio, realizations)
                run.seconds += time.perf_counter() - t0
        errors = np.empty((b, len(self.runs)))
        finals = {}
        for i, run in enumerate(self.runs):
            t0 = time.perf_counter()
            if run.solver is None:
                errors[:, i] = 0.0
            else:
                errors[:, i] = self.integrators[run.L].squared_errors(ref_state, states[i])
            run.seconds += time.perf_counter() - t0
            if keep_final:
                finals[run.L, run.N] = ref_state[0] if run.solver is None else states[i][0]
        if keep_final:
            finals["ref"] = ref_state[0]
            return errors, finals
        return errors

    @property
    def ref_u0(self):
        return self.u0[self.cfg.L_max]

    def _advance(self, run, mass, state, dw, offset, realizations):
        try:
            return advance(run.solver, mass, state, dw, self.noise, step_offset=offset)
        except SimulationError as exc:
            l = realizations[exc.columns[0]] if exc.columns else None
            raise ExperimentError(
                f"realization {l}, L={run.L}, N={run.N}: {exc}", realization=l, L=run.L, N=run.N
            ) from exc


def _chunks(items: Sequence, size: int) -> list:
    return [items[s:s + size] for s in range(0, len(items), size)]


def _run_chunk(args):
    cfg, cells, realizations = args
    engine = _Engine(cfg, cells)
    errors = engine.run(realizations)
    return errors, [run.seconds for run in engine.runs], engine.ref.seconds


def realization_errors(cfg: ExperimentConfig, cells: Sequence[tuple[int, int]] | None = None,
                       realizations: Sequence[int] | None = None) -> np.ndarray:
    """Per-realization squared errors, shape (n_realizations, len(cells))."""
    cfg.validate()
    cells = cfg.cells() if cells is None else list(cells)
    realizations = range(cfg.n_realizations) if realizations is None else realizations
    engine = _Engine(cfg, cells)
    out = [engine.run(chunk) for chunk in _chunks(list(realizations), cfg.batch_size)]
    return np.concatenate(out, axis=0) if out else np.empty((0, len(cells)))


def _summarize(errors: np.ndarray) -> tuple[float, float]:
    n = len(errors)
    mean = float(np.sum(errors) / n)
    if n == 1:
        std = math.nan
    elif np.all(errors == errors[0]):
        std = 0.0  # the rounded mean would leave a spurious ~1e-19 spread
    else:
        std = float(np.std(errors, ddof=1) / math.sqrt(n))
    return mean, std


def _table_from_errors(cfg, cells, errors, seconds) -> ErrorTable:
    rows = []
    for j, (L, N) in enumerate(cells):
        mean, std = _summarize(errors[:, j])
        rows.append(ErrorRow(L=L, N=N, Np=len(errors), E_hat=mean, std_err=std,
                             wall_seconds=seconds[j] if cfg.record_timings else None))
    table = ErrorTable(tuple(rows))
    for varying in ("time", "space"):
        if _has_pairs(table, varying):
            table = fit_orders(table, varying)
    return table


@dataclass
class RunResult:
    table: ErrorTable
    errors: np.ndarray
    reference_seconds: float
    finals: dict = field(default_factory=dict)


def execute(cfg: ExperimentConfig, keep_final: bool = False) -> RunResult:
    """Run every configured cell; on failure flush the completed realizations first."""
    cfg.validate()
    cells = cfg.cells()
    chunks = _chunks(range(cfg.n_realizations), cfg.batch_size)
    done: list[np.ndarray] = []
    seconds = np.zeros(len(cells))
    ref_seconds = 0.0
    finals = {}
    try:
        if cfg.workers > 1 and len(chunks) > 1 and not keep_final:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                for errors, secs, ref_s in pool.map(_run_chunk, [(cfg, cells, list(c)) for c in chunks]):
                    done.append(errors)
                    seconds += secs
                    ref_seconds += ref_s
        else:
            engine = _Engine(cfg, cells)
            for k, chunk in enumerate(chunks):
                log.info("realizations %d..%d of %d", chunk.start, chunk.stop - 1, cfg.n_realizations)
                if keep_final and k == 0:
                    errors, finals = engine.run(list(chunk), keep_final=True)
                else:
                    errors = engine.run(list(chunk))
                done.append(errors)
            seconds = np.array([run.seconds for run in engine.runs])
            ref_seconds = engine.ref.seconds
    except ExperimentError:
        if done and cfg.output_path:
            partial = _table_from_errors(cfg, cells, np.concatenate(done, axis=0), seconds)
            partial.write_csv(cfg.output_path)
            log.error("flushed %d completed realizations to %s", partial.rows[0].Np, cfg.output_path)
        raise
    errors = np.concatenate(done, axis=0)
    table = _table_from_errors(cfg, cells, errors, seconds)
    if cfg.output_path:
        table.write_csv(cfg.output_path)
    return RunResult(table=table, errors=errors, reference_seconds=ref_seconds, finals=finals)


def run_table(cfg: ExperimentConfig) -> ErrorTable:
    """Estimate E(L, L_max, N, N_max) for every configured cell and fit orders."""
    return execute(cfg).table


def run_error_cell(cfg: ExperimentConfig, L: int, N: int) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the squared L2 error for one cell."""
    cfg = replace(cfg, L_list=(L,), N_list=(N,), output_path=None).validate()
    errors = realization_errors(cfg, [(L, N)])
    return _summarize(errors[:, 0])


def deterministic_convergence_study(
    L_list: Sequence[int],
    N_list: Sequence[int],
    k: int = 1,
    m: int = 1,
    T: float = 1.0,
    bbox=((-1.0, 1.0), (-1.0, 1.0)),
    solver: SolverConfig = SolverConfig(method="cholesky"),
    quadrature_order: int = 4,
) -> ErrorTable:
    """Noiseless runs against the exact heat semigroup on a Neumann eigenfunction.

    The error is the discrete L2 norm (not squared) of u_h(T) minus the centered
    projection of exp(-lambda T) u0, so the table has ``quantity="l2"``.
    """
    u0 = neumann_eigenfunction(k, m, bbox)
    decay = math.exp(-eigenvalue(k, m, bbox) * T)
    noise = zero_noise()
    rows = []
    for L in sorted(L_list):
        mesh = build_rect_mesh(L, bbox)
        A = assemble_stiffness(mesh)
        start = cell_average_project(u0, mesh, quadrature_order).values[None, :]
        exact = decay * centered_project(u0, mesh).values
        for N in sorted(N_list):
            t0 = time.perf_counter()
            stepper = StepSolver(mesh.measures, T / N, A, solver)
            u = advance(stepper, mesh.measures, start, np.zeros((1, N)), noise)[0]
            err = math.sqrt(float(np.dot(mesh.measures, (u - exact) ** 2)))
            rows.append(ErrorRow(L=L, N=N, Np=1, E_hat=err, std_err=0.0,
                                 wall_seconds=time.perf_counter() - t0))
    table = ErrorTable(tuple(rows), quantity="l2")
    for varying in ("time", "space"):
        if _has_pairs(table, varying):
            table = fit_orders(table, varying)
    return table


__all__ = [
    "CSV_HEADER",
    "ErrorRow",
    "ErrorTable",
    "ExperimentConfig",
    "ExperimentError",
    "RunResult",
    "deterministic_convergence_study",
    "execute",
    "fit_orders",
    "least_squares_order",
    "read_table_csv",
    "realization_errors",
    "run_error_cell",
    "run_table",
]
