"""Brownian increments and the semi-implicit Euler finite volume scheme.

Each step solves

    m_K (u_K^n - u_K^{n-1}) + tau * sum_L (m_sigma / d_KL) (u_K^n - u_L^n)
        = m_K g(u_K^{n-1}) dW_n

i.e. (M + tau A) u^n = M (u^{n-1} + g(u^{n-1}) dW_n), diffusion implicit and
noise coefficient explicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from fvshe.field import Field
from fvshe.mesh import Mesh
from fvshe.operators import SolverConfig, SolverError, SparseOperator, StepSolver, assemble_stiffness


@dataclass(frozen=True, eq=False)
class BrownianIncrements:
    n_steps: int
    horizon: float
    increments: np.ndarray
    seed_provenance: tuple[int, int] | None = None

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float, copy=True).reshape(-1)
        if len(inc) != self.n_steps:
            raise ValueError(f"{len(inc)} increments for {self.n_steps} steps")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def tau(self) -> float:
        return self.horizon / self.n_steps


@dataclass(frozen=True)
class NoiseModel:
    name: str
    g: Callable[[np.ndarray], np.ndarray]

    def __call__(self, u):
        return self.g(u)


def sqrt_one_plus_sq() -> NoiseModel:
    return NoiseModel("sqrt-one-plus-sq", lambda u: np.sqrt(1.0 + u * u))


def zero_noise() -> NoiseModel:
    return NoiseModel("zero", np.zeros_like)


def resolve_noise(name: str) -> NoiseModel:
    """Builtin noise coefficients: ``sqrt-one-plus-sq``, ``zero``, ``const:c``, ``linear:c``."""
    name = name.strip()
    if name == "sqrt-one-plus-sq":
        return sqrt_one_plus_sq()
    if name == "zero":
        return zero_noise()
    if name.startswith("const:"):
        c = float(name[len("const:"):])
        return NoiseModel(name, lambda u: np.full_like(u, c))
    if name.startswith("linear:"):
        c = float(name[len("linear:"):])
        return NoiseModel(name, lambda u: c * u)
    raise ValueError(f"unknown noise model {name!r}")


def _check_seed(master_seed: int, realization: int):
    if int(master_seed) != master_seed or master_seed < 0:
        raise ValueError(f"master seed must be a non-negative integer, got {master_seed!r}")
    if int(realization) != realization or realization < 0:
        raise ValueError(f"realization index must be a non-negative integer, got {realization!r}")


def realization_generator(master_seed: int, realization: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by (master_seed, realization)."""
    _check_seed(master_seed, realization)
    seq = np.random.SeedSequence([int(master_seed), int(realization)])
    return np.random.Generator(np.random.Philox(seq))


def sample_increments(master_seed: int, realization: int, N: int, T: float) -> BrownianIncrements:
    """N independent Normal(0, T/N) increments for one realization."""
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N!r}")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T!r}")
    rng = realization_generator(master_seed, realization)
    inc = rng.standard_normal(int(N)) * math.sqrt(T / N)
    return BrownianIncrements(int(N), float(T), inc, (int(master_seed), int(realization)))


def block_sums(dw: np.ndarray, ratio: int) -> np.ndarray:
    """Sum consecutive groups of ``ratio`` increments along the last axis."""
    if ratio == 1:
        return np.array(dw, dtype=float, copy=True)
    dw = np.asarray(dw, dtype=float)
    return dw.reshape(dw.shape[:-1] + (dw.shape[-1] // ratio, ratio)).sum(axis=-1)


def aggregate_increments(fine: BrownianIncrements, coarse_N: int) -> BrownianIncrements:
    """Coarsen a path to ``coarse_N`` steps by summing blocks of fine increments."""
    if coarse_N < 1 or fine.n_steps % coarse_N:
        raise ValueError(f"coarse_N={coarse_N} does not divide fine n_steps={fine.n_steps}")
    return BrownianIncrements(
        int(coarse_N), fine.horizon, block_sums(fine.increments, fine.n_steps // coarse_N), fine.seed_provenance
    )


class SimulationError(RuntimeError):
    def __init__(self, message, step=None, columns=()):
        super().__init__(message)
        self.step = step
        self.columns = list(columns)


def advance(solver: StepSolver, mass: np.ndarray, state: np.ndarray, dw: np.ndarray,
            noise: NoiseModel, step_offset: int = 0, callback=None) -> np.ndarray:
    """Run ``dw.shape[-1]`` steps on a batch of states of shape (batch, n).

    ``dw`` has shape (batch, steps). The previous state warm-starts every
    iterative solve. ``callback(n, state)`` is called after each step with the
    global step number.
    """
    u = np.array(state, dtype=float, copy=True)
    for j in range(dw.shape[1]):
        rhs = mass * (u + noise(u) * dw[:, j : j + 1])
        try:
            u = solver.solve(rhs, x0=u)
        except SolverError as exc:
            raise SimulationError(f"step {step_offset + j + 1}: {exc}", step=step_offset + j + 1,
                                  columns=exc.columns) from exc
        if callback is not None:
            callback(step_offset + j + 1, u)
    bad = ~np.isfinite(u).all(axis=1)
    if bad.any():
        raise SimulationError(f"non-finite state after step {step_offset + dw.shape[1]}",
                              step=step_offset + dw.shape[1], columns=np.flatnonzero(bad).tolist())
    return u


def fvs_step(u_prev: Field, dW: float, tau: float, mesh: Mesh, A: SparseOperator, noise: NoiseModel,
             cfg: SolverConfig = SolverConfig(), warm_start: Field | None = None,
             solver: StepSolver | None = None) -> Field:
    """One step of the scheme; pass ``solver`` to reuse a factorisation."""
    if u_prev.mesh is not mesh:
        raise ValueError("u_prev does not live on mesh")
    if solver is None:
        solver = StepSolver(mesh.measures, tau, A, cfg)
    elif solver.tau != tau:
        raise ValueError(f"solver built for tau={solver.tau}, step requested tau={tau}")
    u = u_prev.values
    rhs = mesh.measures * (u + noise(u) * dW)
    x0 = (warm_start if warm_start is not None else u_prev).values
    return Field(mesh, solver.solve(rhs, x0=x0))


def simulate(u0_field: Field, increments: BrownianIncrements, mesh: Mesh, noise: NoiseModel,
             cfg: SolverConfig = SolverConfig(), callback=None, A: SparseOperator | None = None) -> Field:
    """Iterate the scheme over the whole path and return u at the horizon.

    ``callback(n, field)`` receives every intermediate state when given.
    """
    if u0_field.mesh is not mesh:
        raise ValueError("initial field does not live on mesh")
    if increments.n_steps < 1:
        raise ValueError("need at least one time step")
    A = assemble_stiffness(mesh) if A is None else A
    solver = StepSolver(mesh.measures, increments.tau, A, cfg)
    hook = None
    if callback is not None:
        def hook(n, u):
            callback(n, Field(mesh, u[0]))
    u = advance(solver, mesh.measures, u0_field.values[None, :], increments.increments[None, :], noise,
                callback=hook)
    return Field(mesh, u[0])
