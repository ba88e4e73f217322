"""Fast invariant checks run by ``fvshe selftest``."""

from __future__ import annotations

import numpy as np

from fvshe.field import Field, cross_mesh_l2_error, cell_average_project, discrete_l2_norm, quartic_initial_value
from fvshe.mesh import build_rect_mesh
from fvshe.operators import SolverConfig, StepSolver, _assemble, assemble_stiffness
from fvshe.sde import advance, sample_increments, sqrt_one_plus_sq, zero_noise

FAULTS = ("sign-flip",)


def _stiffness(mesh, fault):
    if fault == "sign-flip":
        trans = mesh.transmissibilities.copy()
        trans[len(trans) // 2] *= -1.0
        return _assemble(mesh, trans)
    return assemble_stiffness(mesh)


def check_ibp(fault=None):
    mesh = build_rect_mesh(16)
    A = _stiffness(mesh, fault)
    rng = np.random.default_rng(2024)
    k, l = mesh.edges[:, 0], mesh.edges[:, 1]
    worst = 0.0
    for _ in range(100):
        v, w = rng.standard_normal((2, mesh.n_cells))
        lhs = float(np.dot(A @ w, v))
        rhs = float(np.sum(mesh.transmissibilities * (w[k] - w[l]) * (v[k] - v[l])))
        scale = float(np.sum(mesh.transmissibilities * np.abs((w[k] - w[l]) * (v[k] - v[l]))))
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst <= 1e-12, f"max relative deviation {worst:.2e} over 100 pairs (tol 1e-12)"


def _path_states(mesh, A, noise, N, seed):
    u0 = cell_average_project(quartic_initial_value(), mesh).values
    inc = sample_increments(seed, 0, N, 1.0)
    solver = StepSolver(mesh.measures, 1.0 / N, A, SolverConfig(method="cg"))
    states = [u0]
    advance(solver, mesh.measures, u0[None, :], inc.increments[None, :], noise,
            callback=lambda n, u: states.append(u[0].copy()))
    return states, inc.increments


def check_mass(fault=None):
    mesh = build_rect_mesh(12)
    A = _stiffness(mesh, fault)
    noise = sqrt_one_plus_sq()
    states, dw = _path_states(mesh, A, noise, 64, seed=11)
    m = mesh.measures
    worst = 0.0
    for n in range(1, len(states)):
        prev = states[n - 1]
        expected = m @ prev + (m @ noise(prev)) * dw[n - 1]
        worst = max(worst, abs(m @ states[n] - expected) / mesh.domain_measure)
    return worst <= 1e-9, f"max mass defect {worst:.2e} per unit mass over 64 steps (tol 1e-9)"


def check_energy(fault=None):
    mesh = build_rect_mesh(12)
    A = _stiffness(mesh, fault)
    states, _ = _path_states(mesh, A, zero_noise(), 64, seed=11)
    norms = [float(np.sqrt(mesh.measures @ u**2)) for u in states]
    worst = max(b - a for a, b in zip(norms, norms[1:]))
    return worst <= 1e-10, f"largest norm increase {worst:.2e} over 64 noiseless steps (tol 1e-10)"


def check_manufactured(fault=None):
    mesh = build_rect_mesh(32)
    A = _stiffness(mesh, fault)
    cfg = SolverConfig(method="cg", rel_tolerance=1e-12)
    rng = np.random.default_rng(7)
    worst = 0.0
    for tau in (1e-3, 1e-2):
        solver = StepSolver(mesh.measures, tau, A, cfg)
        w = rng.standard_normal(mesh.n_cells)
        try:
            u = solver.solve(solver.matvec(w[None, :])[0])
        except Exception as exc:  # a broken operator may break the solver too
            return False, f"solve failed: {exc}"
        worst = max(worst, float(np.linalg.norm(u - w) / np.linalg.norm(w)))
    return worst <= 10 * cfg.rel_tolerance, f"max relative recovery error {worst:.2e} (tol 1e-11)"


def check_cross_mesh(fault=None):
    mesh = build_rect_mesh(10)
    rng = np.random.default_rng(3)
    w1 = Field(mesh, rng.standard_normal(mesh.n_cells))
    w2 = Field(mesh, rng.standard_normal(mesh.n_cells))
    direct = discrete_l2_norm(w1 - w2) ** 2
    exact = cross_mesh_l2_error(w1, w2)
    rel = abs(exact - direct) / direct
    coarse = build_rect_mesh(3)
    w3 = Field(coarse, rng.standard_normal(coarse.n_cells))
    asym = abs(cross_mesh_l2_error(w1, w3) - cross_mesh_l2_error(w3, w1))
    ok = rel <= 1e-12 and asym <= 1e-14 * cross_mesh_l2_error(w1, w3)
    return ok, f"identical-mesh deviation {rel:.2e} (tol 1e-12), asymmetry {asym:.2e}"


CHECKS = [
    ("integration-by-parts", check_ibp),
    ("mass-balance", check_mass),
    ("noiseless-energy-decay", check_energy),
    ("manufactured-solve", check_manufactured),
    ("cross-mesh-norm", check_cross_mesh),
]


def run_selftest(fault=None, out=print) -> bool:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    all_ok = True
    for name, check in CHECKS:
        ok, detail = check(fault)
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
