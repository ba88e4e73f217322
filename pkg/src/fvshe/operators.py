"""TPFA stiffness assembly and the SPD solves of the implicit step."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from fvshe.field import Field, ScalarFunction2D, cell_integrals
from fvshe.mesh import Mesh

Method = Literal["cg", "cholesky"]


class SolverError(RuntimeError):
    """A linear solve did not reach the requested tolerance.

    ``residual`` holds the worst relative residual reached and ``columns`` the
    batch columns that failed (``[0]`` for a single right-hand side).
    """

    def __init__(self, message, residual=math.nan, iterations=0, columns=()):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.columns = list(columns)


@dataclass(frozen=True)
class SolverConfig:
    method: Method = "cg"
    rel_tolerance: float = 1e-12
    max_iterations: int | None = None  # None means 10 * n

    def __post_init__(self):
        if self.method not in ("cg", "cholesky"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not 0.0 < self.rel_tolerance < 1.0:
            raise ValueError(f"rel_tolerance must lie in (0, 1), got {self.rel_tolerance!r}")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations!r}")

    def iteration_cap(self, n: int) -> int:
        return self.max_iterations if self.max_iterations is not None else 10 * n


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Symmetric sparse matrix, stored in CSR form."""

    matrix: sp.csr_matrix

    def __post_init__(self):
        mat = sp.csr_matrix(self.matrix, dtype=float)
        mat.sort_indices()
        for arr in (mat.data, mat.indices, mat.indptr):
            arr.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def entry(self, i: int, j: int) -> float:
        return float(self.matrix[i, j])

    def __matmul__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return np.asarray(self.matrix @ x.T).T
        return self.matrix @ x


def _assemble(mesh: Mesh, transmissibility: np.ndarray) -> SparseOperator:
    n = mesh.n_cells
    k, l = mesh.edges[:, 0], mesh.edges[:, 1]
    diag = np.bincount(k, transmissibility, minlength=n) + np.bincount(l, transmissibility, minlength=n)
    rows = np.concatenate([np.arange(n), k, l])
    cols = np.concatenate([np.arange(n), l, k])
    vals = np.concatenate([diag, -transmissibility, -transmissibility])
    return SparseOperator(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr())


def assemble_stiffness(mesh: Mesh) -> SparseOperator:
    """TPFA Laplacian: A[K, K] = sum of m_sigma/d_KL, A[K, L] = -m_sigma/d_KL."""
    return _assemble(mesh, mesh.transmissibilities)


def apply(op: SparseOperator, w: Field) -> Field:
    if len(w.values) != op.n:
        raise ValueError(f"operator of size {op.n} applied to field of size {len(w.values)}")
    return Field(w.mesh, op @ w.values)


def format_operator(op: SparseOperator) -> str:
    """Coordinate text dump with one ``i j value`` line per stored entry."""
    coo = op.matrix.tocoo()
    return "".join(f"{i} {j} {v!r}\n" for i, j, v in zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # reduction along contiguous rows: each row's result is independent of the batch
    return np.sum(a * b, axis=1)


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(_rowdot(x, x))


def _cg_failure(iterations, residual, rel_tolerance, columns):
    return SolverError(
        f"conjugate gradient stopped after {iterations} iterations "
        f"with relative residual {residual:.3e} > {rel_tolerance:.1e}",
        residual=residual, iterations=iterations, columns=columns,
    )


def batched_cg(matvec, b: np.ndarray, x0: np.ndarray | None, rel_tolerance: float,
               max_iterations: int, project=None) -> np.ndarray:
    """Conjugate gradients run independently on every row of ``b``.

    Converged rows are frozen, so each row's iterates do not depend on the rest
    of the batch. The recursive residual is confirmed against the true residual
    before a row is accepted; ``project`` (optional) maps each iterate back to
    a subspace, as needed for singular systems.
    """
    b = np.atleast_2d(np.asarray(b, dtype=float))
    x = np.zeros_like(b) if x0 is None else np.array(np.atleast_2d(x0), dtype=float)
    bnorm = _row_norms(b)
    target = rel_tolerance * bnorm
    x[bnorm == 0.0] = 0.0
    todo = np.flatnonzero(bnorm > 0.0)
    iterations = 0
    while todo.size:
        r = b[todo] - matvec(x[todo])
        if project is not None:
            r = project(r)
        rs = _rowdot(r, r)
        active = np.sqrt(rs) > target[todo]
        if active.any() and iterations >= max_iterations:
            res = np.sqrt(rs[active]) / bnorm[todo[active]]
            raise _cg_failure(iterations, float(res.max()), rel_tolerance, todo[active].tolist())
        p = r.copy()
        while active.any() and iterations < max_iterations:
            a = np.flatnonzero(active)
            ap = matvec(p[a])
            alpha = rs[a] / _rowdot(p[a], ap)
            x[todo[a]] += alpha[:, None] * p[a]
            ra = r[a] - alpha[:, None] * ap
            if project is not None:
                ra = project(ra)
            rs_new = _rowdot(ra, ra)
            r[a] = ra
            p[a] = ra + (rs_new / rs[a])[:, None] * p[a]
            rs[a] = rs_new
            active[a] = np.sqrt(rs_new) > target[todo[a]]
            iterations += 1
        true_res = _row_norms(b[todo] - matvec(x[todo]))
        todo = todo[true_res > target[todo]]
    return x


class StepSolver:
    """Solver for (M + tau A) u = rhs with the matrix fixed across calls.

    Right-hand sides may be a single vector of length n or a batch of shape
    (batch, n). With ``method="cholesky"`` the matrix is factorised once in
    banded form; each column of a batch is solved independently, so results
    are bitwise independent of how realizations are grouped.
    """

    def __init__(self, mass: np.ndarray, tau: float, A: SparseOperator, cfg: SolverConfig = SolverConfig()):
        mass = np.asarray(mass, dtype=float)
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau!r}")
        if np.any(mass <= 0):
            raise ValueError("all cell measures must be positive")
        if len(mass) != A.n:
            raise ValueError(f"{len(mass)} masses for operator of size {A.n}")
        self.n = A.n
        self.tau = tau
        self.cfg = cfg
        self.matrix = (sp.diags(mass) + tau * A.matrix).tocsr()
        self._factor = None
        if cfg.method == "cholesky":
            self._factor = self._banded_cholesky()

    def _banded_cholesky(self):
        coo = sp.triu(self.matrix).tocoo()
        kd = int(np.max(coo.col - coo.row)) if coo.nnz else 0
        ab = np.zeros((kd + 1, self.n))
        ab[kd + coo.row - coo.col, coo.col] = coo.data
        return sla.cholesky_banded(ab, lower=False)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ x.T).T

    def solve(self, rhs: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        single = rhs.ndim == 1
        b = np.atleast_2d(rhs)
        if b.shape[1] != self.n:
            raise ValueError(f"right-hand side of length {b.shape[1]} for system of size {self.n}")
        if self._factor is not None:
            x = sla.cho_solve_banded((self._factor, False), b.T, check_finite=False).T
            if not np.all(np.isfinite(x)):
                bad = np.flatnonzero(~np.isfinite(x).all(axis=1))
                raise SolverError("non-finite solution", columns=bad.tolist())
        else:
            x = batched_cg(self.matvec, b, x0, self.cfg.rel_tolerance, self.cfg.iteration_cap(self.n))
        return x[0] if single else x


def solve_spd(diag_mass, tau: float, A: SparseOperator, rhs, cfg: SolverConfig = SolverConfig(),
              warm_start=None):
    """Solve (M + tau A) u = rhs where M = diag(diag_mass)."""
    solver = StepSolver(diag_mass, tau, A, cfg)
    b = rhs.values if isinstance(rhs, Field) else rhs
    x0 = warm_start.values if isinstance(warm_start, Field) else warm_start
    u = solver.solve(b, x0)
    return Field(rhs.mesh, u) if isinstance(rhs, Field) else u


def elliptic_project(w: ScalarFunction2D, mesh: Mesh, cfg: SolverConfig = SolverConfig(),
                     quadrature_order: int = 4) -> Field:
    """Elliptic projection of ``w``: the field whose TPFA fluxes balance
    -integral of Laplacian(w) over each cell and whose integral matches that of ``w``.

    The singular Neumann system is solved by conjugate gradients on the
    complement of the constants; the constant is fixed afterwards by the mean
    condition. ``cfg.method`` is ignored, the solve is always iterative.
    """
    A = assemble_stiffness(mesh)
    b = -cell_integrals(w.lap, mesh, quadrature_order)
    bnorm = float(np.linalg.norm(b))
    if abs(float(np.sum(b))) > 1e-8 * bnorm:
        raise ValueError(
            f"Laplacian integrates to {-np.sum(b):.3e}, incompatible with homogeneous Neumann data"
        )
    b = b - b.mean()

    def project(v):
        return v - v.mean(axis=1, keepdims=True)

    x = batched_cg(lambda v: A @ v, b[None, :], None, cfg.rel_tolerance,
                   cfg.iteration_cap(mesh.n_cells), project=project)[0]
    total = float(np.sum(cell_integrals(w, mesh, quadrature_order)))
    shift = (total - float(np.dot(mesh.measures, x))) / mesh.domain_measure
    return Field(mesh, x + shift)
