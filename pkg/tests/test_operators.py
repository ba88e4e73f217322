import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvshe.field import Field, ScalarFunction2D, cell_integrals, mean_value, neumann_eigenfunction, eigenvalue
from fvshe.mesh import build_rect_mesh
from fvshe.operators import (
    SolverConfig,
    SolverError,
    StepSolver,
    apply,
    assemble_stiffness,
    elliptic_project,
    format_operator,
    solve_spd,
)

UNIT = ((0.0, 1.0), (0.0, 1.0))


def test_single_cell_is_zero():
    A = assemble_stiffness(build_rect_mesh(1))
    assert A.n == 1
    assert A.entry(0, 0) == 0.0


def test_two_by_one():
    mesh = build_rect_mesh((2, 1), ((0, 2), (0, 1)))
    A = assemble_stiffness(mesh).matrix.toarray()
    np.testing.assert_array_equal(A, [[1.0, -1.0], [-1.0, 1.0]])


def test_two_by_two_unit_square():
    A = assemble_stiffness(build_rect_mesh(2, UNIT)).matrix.toarray()
    # every transmissibility is 0.5 / 0.5 = 1; cells 0-1, 2-3, 0-2, 1-3 adjacent
    expected = np.array([[2, -1, -1, 0], [-1, 2, 0, -1], [-1, 0, 2, -1], [0, -1, -1, 2]], dtype=float)
    np.testing.assert_array_equal(A, expected)


def test_operator_is_read_only():
    A = assemble_stiffness(build_rect_mesh(3))
    with pytest.raises(ValueError):
        A.matrix.data[0] = 1.0


def test_apply_constants_and_linear():
    mesh = build_rect_mesh(2, UNIT)
    A = assemble_stiffness(mesh)
    np.testing.assert_array_equal(apply(A, Field(mesh, np.ones(4))).values, 0.0)
    np.testing.assert_array_equal(apply(A, Field(mesh, [0, 1, 0, 1])).values, [-1, 1, -1, 1])


def test_format_operator_lines():
    text = format_operator(assemble_stiffness(build_rect_mesh((2, 1), ((0, 2), (0, 1)))))
    assert sorted(text.splitlines()) == ["0 0 1.0", "0 1 -1.0", "1 0 -1.0", "1 1 1.0"]


@pytest.mark.parametrize("method", ["cg", "cholesky"])
def test_solve_spd_closed_form(method):
    mesh = build_rect_mesh((2, 1), ((0, 2), (0, 1)))
    A = assemble_stiffness(mesh)
    # [[1.5, -0.5], [-0.5, 1.5]] u = [4, 0]  ->  u = (3, 1)
    u = solve_spd(np.ones(2), 0.5, A, np.array([4.0, 0.0]), SolverConfig(method=method))
    np.testing.assert_allclose(u, [3.0, 1.0], rtol=1e-12)
    # half-unit squares: m = 0.25, transmissibility 1, tau = 0.1
    # [[0.35, -0.1], [-0.1, 0.35]] u = (1, 0)  ->  u = (0.35, 0.1) / 0.1125 = (28/9, 8/9)
    small = build_rect_mesh((2, 1), ((0, 1), (0, 0.5)))
    u = solve_spd(small.measures, 0.1, assemble_stiffness(small), np.array([1.0, 0.0]), SolverConfig(method=method))
    np.testing.assert_allclose(u, [28 / 9, 8 / 9], rtol=1e-12)


def test_solve_spd_field_roundtrip():
    mesh = build_rect_mesh(2, UNIT)
    rhs = Field(mesh, [1.0, 2.0, 3.0, 4.0])
    out = solve_spd(mesh.measures, 0.1, assemble_stiffness(mesh), rhs)
    assert isinstance(out, Field) and out.mesh is mesh


@pytest.mark.parametrize("L", [4, 16, 64, 128])
def test_manufactured_recovery(L, rng):
    mesh = build_rect_mesh(L)
    A = assemble_stiffness(mesh)
    cfg = SolverConfig(method="cg", rel_tolerance=1e-12)
    solver = StepSolver(mesh.measures, 1e-3, A, cfg)
    w = rng.standard_normal(mesh.n_cells)
    u = solver.solve(solver.matvec(w[None, :])[0])
    rhs = solver.matvec(w[None, :])[0]
    assert np.linalg.norm(solver.matvec(u[None, :])[0] - rhs) <= 1e-12 * np.linalg.norm(rhs) * 1.0001
    assert np.linalg.norm(u - w) <= 1e-10 * np.linalg.norm(w)


def test_cg_failure_raises():
    mesh = build_rect_mesh(32)
    solver = StepSolver(mesh.measures, 10.0, assemble_stiffness(mesh),
                        SolverConfig(method="cg", rel_tolerance=1e-12, max_iterations=3))
    with pytest.raises(SolverError) as info:
        solver.solve(np.random.default_rng(0).standard_normal(mesh.n_cells))
    assert info.value.residual > 1e-12
    assert info.value.columns == [0]


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(method="lu")
    with pytest.raises(ValueError):
        SolverConfig(rel_tolerance=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iterations=0)
    assert SolverConfig().iteration_cap(50) == 500


def test_cholesky_and_cg_agree(rng):
    mesh = build_rect_mesh((12, 9), ((-1, 2), (0, 1)))
    A = assemble_stiffness(mesh)
    rhs = rng.standard_normal((5, mesh.n_cells))
    a = StepSolver(mesh.measures, 0.02, A, SolverConfig(method="cholesky")).solve(rhs)
    b = StepSolver(mesh.measures, 0.02, A, SolverConfig(method="cg")).solve(rhs)
    assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(a)


@pytest.mark.parametrize("method", ["cg", "cholesky"])
def test_batched_solve_matches_single(method, rng):
    mesh = build_rect_mesh(10)
    solver = StepSolver(mesh.measures, 0.05, assemble_stiffness(mesh), SolverConfig(method=method))
    rhs = rng.standard_normal((4, mesh.n_cells))
    batch = solver.solve(rhs)
    for i in range(4):
        np.testing.assert_array_equal(solver.solve(rhs[i : i + 1])[0], batch[i])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31))
def test_ibp_identity_and_psd(nx, ny, seed):
    mesh = build_rect_mesh((nx, ny), ((-1, 0.5), (0, 2)))
    A = assemble_stiffness(mesh)
    rng = np.random.default_rng(seed)
    v, w = rng.standard_normal((2, mesh.n_cells))
    k, l = mesh.edges[:, 0], mesh.edges[:, 1]
    t = mesh.transmissibilities
    rhs = np.sum(t * (w[k] - w[l]) * (v[k] - v[l]))
    scale = np.sum(t * np.abs((w[k] - w[l]) * (v[k] - v[l]))) + 1e-300
    assert abs(np.dot(A @ w, v) - rhs) <= 1e-12 * scale
    assert np.dot(A @ w, w) >= -1e-12 * np.sum(t * (w[k] - w[l]) ** 2)


def test_elliptic_projection_of_constant():
    mesh = build_rect_mesh(8)
    c = ScalarFunction2D(lambda x, y: 0 * x + 3.0, laplacian=lambda x, y: 0 * x)
    np.testing.assert_allclose(elliptic_project(c, mesh).values, 3.0, rtol=1e-14)


def test_elliptic_projection_of_eigenfunction():
    mesh = build_rect_mesh(6)
    f = neumann_eigenfunction(1, 1)
    w = elliptic_project(f, mesh)
    assert abs(mean_value(w)) <= 1e-10
    # TPFA fluxes balance the cell integrals of -Laplacian
    A = assemble_stiffness(mesh)
    np.testing.assert_allclose(A @ w.values, -cell_integrals(f.lap, mesh), atol=1e-10)


def test_elliptic_projection_mean_condition(u0):
    mesh = build_rect_mesh(16)
    w = elliptic_project(u0, mesh)
    assert np.dot(mesh.measures, w.values) == pytest.approx(np.sum(cell_integrals(u0, mesh)), rel=1e-12)


def test_elliptic_projection_rejects_incompatible_laplacian():
    mesh = build_rect_mesh(5)
    f = ScalarFunction2D(lambda x, y: x * x, laplacian=lambda x, y: 0 * x + 2.0)
    with pytest.raises(ValueError, match="incompatible"):
        elliptic_project(f, mesh)


def test_eigenvalue_closed_form():
    assert eigenvalue(1, 1) == pytest.approx(2 * (np.pi / 2) ** 2)


@pytest.mark.parametrize("method", ["cg", "cholesky"])
def test_single_cell_solve_is_division(method):
    mesh = build_rect_mesh(1)
    u = solve_spd(mesh.measures, 0.3, assemble_stiffness(mesh), np.array([2.0]), SolverConfig(method=method))
    assert u[0] == 0.5
