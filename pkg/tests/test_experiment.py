import math
from dataclasses import replace

import numpy as np
import pytest

from fvshe.experiment import (
    ErrorRow,
    ErrorTable,
    ExperimentConfig,
    ExperimentError,
    _Engine,
    block_length,
    deterministic_convergence_study,
    execute,
    fit_orders,
    least_squares_order,
    read_table_csv,
    realization_errors,
    run_error_cell,
    run_table,
)
from fvshe.field import cell_average_project, cross_mesh_l2_error, Field, quartic_initial_value
from fvshe.mesh import build_rect_mesh
from fvshe.operators import SolverConfig
from fvshe.sde import aggregate_increments, sample_increments, simulate, sqrt_one_plus_sq

from desk_runs import desk

SMALL = ExperimentConfig(L_list=(2, 4), L_max=8, N_list=(4, 8), N_max=32, n_realizations=12)


def _rows(pairs):
    return ErrorTable(tuple(ErrorRow(L=L, N=N, Np=1, E_hat=E, std_err=0.0) for L, N, E in pairs))


def test_fit_orders_time_pair():
    t = fit_orders(_rows([(40, 64, 3.839e-2), (40, 128, 1.783e-2)]), "time")
    assert t.rows[0].order_time is None
    # inputs carry four significant digits, so the order is good to about 1e-3
    assert t.rows[1].order_time == pytest.approx(1.107, abs=1e-3)


def test_fit_orders_space_pair():
    t = fit_orders(_rows([(6, 10240, 1.533e-4), (8, 10240, 6.236e-5)]), "space")
    assert t.rows[1].order_space == pytest.approx(3.126, abs=1e-3)


def test_fit_orders_exact_halving():
    t = fit_orders(_rows([(4, 8, 1.0), (4, 16, 0.5), (4, 32, 0.25)]), "time")
    assert t.column("order_time") == [None, 1.0, 1.0]


def test_fit_orders_rejects_non_monotone():
    with pytest.raises(ValueError, match="monotone"):
        fit_orders(_rows([(4, 8, 1.0), (4, 32, 0.5), (4, 16, 0.25)]), "time")
    with pytest.raises(ValueError):
        fit_orders(_rows([(4, 8, 1.0)]), "time")


def test_fit_orders_zero_error_gives_no_order():
    t = fit_orders(_rows([(4, 8, 1.0), (4, 16, 0.0)]), "time")
    assert t.rows[1].order_time is None


def test_least_squares_order():
    assert least_squares_order([1, 2, 4, 8], [1, 0.25, 1 / 16, 1 / 64]) == pytest.approx(2.0)


def test_block_length():
    assert block_length(10240, [64, 128, 256, 512, 1024]) == 2560
    b = block_length(2 ** 22, [2 ** 14, 2 ** 19])
    assert b == 4096 and 2 ** 22 % b == 0


def test_config_problems_exhaustive():
    cfg = ExperimentConfig(L_list=(3, 20), L_max=16, N_list=(7, 0), N_max=64, n_realizations=0,
                           g="cubic")
    problems = cfg.problems()
    text = "\n".join(problems)
    assert "L=20 exceeds L_max=16" in text
    assert "N=7 does not divide N_max=64" in text
    assert "N=0 must be >= 1" in text
    assert "n_realizations" in text
    assert "g:" in text
    with pytest.raises(ValueError):
        cfg.validate()


def test_reference_cell_has_zero_error():
    cfg = ExperimentConfig(L_list=(8,), L_max=8, N_list=(32,), N_max=32, n_realizations=3)
    table = run_table(cfg)
    assert len(table) == 1
    assert table.rows[0].E_hat == 0.0


def test_noiseless_has_no_variance():
    cfg = replace(SMALL, g="zero", n_realizations=5)
    table = run_table(cfg)
    for r in table.rows:
        assert r.E_hat > 0
        assert r.std_err == 0.0


def test_single_realization_std_err_nan():
    table = run_table(replace(SMALL, n_realizations=1))
    assert all(math.isnan(r.std_err) for r in table.rows)


def test_engine_matches_public_api(u0):
    """The lockstep engine reproduces simulate on aggregated increments."""
    cfg = SMALL
    errors = realization_errors(cfg, cfg.cells(), [0, 5])
    for j, realization in enumerate([0, 5]):
        fine = sample_increments(cfg.master_seed, realization, cfg.N_max, cfg.T)
        ref_mesh = build_rect_mesh(cfg.L_max)
        ref = simulate(cell_average_project(u0, ref_mesh), fine, ref_mesh, sqrt_one_plus_sq(), cfg.solver)
        for i, (L, N) in enumerate(cfg.cells()):
            mesh = build_rect_mesh(L)
            w = simulate(cell_average_project(u0, mesh), aggregate_increments(fine, N), mesh,
                         sqrt_one_plus_sq(), cfg.solver)
            assert errors[j, i] == pytest.approx(cross_mesh_l2_error(ref, w), rel=1e-13)


def test_reference_reuse_is_bitwise():
    together = realization_errors(SMALL)
    for i, cell in enumerate(SMALL.cells()):
        alone = realization_errors(SMALL, [cell])
        np.testing.assert_array_equal(alone[:, 0], together[:, i])
    mean, se = run_error_cell(SMALL, 4, 8)
    row = [r for r in run_table(SMALL).rows if (r.L, r.N) == (4, 8)][0]
    assert (mean, se) == (row.E_hat, row.std_err)


def test_doubling_realizations_keeps_prefix():
    a = execute(SMALL).errors
    b = execute(replace(SMALL, n_realizations=24)).errors
    np.testing.assert_array_equal(a, b[:12])


def test_batch_size_and_workers_invariance():
    base = run_table(SMALL).to_csv()
    assert run_table(replace(SMALL, batch_size=5)).to_csv() == base
    assert run_table(replace(SMALL, batch_size=4, workers=2)).to_csv() == base


def test_cg_and_cholesky_tables_close():
    a = run_table(SMALL)
    b = run_table(replace(SMALL, solver=SolverConfig(method="cg", rel_tolerance=1e-13)))
    np.testing.assert_allclose(a.column("E_hat"), b.column("E_hat"), rtol=1e-8)


def test_csv_roundtrip_and_determinism(tmp_path):
    path = tmp_path / "out" / "t.csv"
    cfg = replace(SMALL, output_path=str(path))
    table = run_table(cfg)
    first = path.read_bytes()
    run_table(cfg)
    assert path.read_bytes() == first
    lines = first.decode().splitlines()
    assert lines[0] == "L,N,Np,E_hat,std_err,order_time,order_space,wall_seconds"
    assert len(lines) == 1 + 4
    back = read_table_csv(path)
    assert back.rows == table.rows


def test_read_table_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("")
    with pytest.raises(ValueError, match="empty"):
        read_table_csv(p)
    p.write_text("L,N,Np,E_hat,std_err,order_time,order_space,wall_seconds\n4,8,1,x,0,,,\n")
    with pytest.raises(ValueError, match=":2:"):
        read_table_csv(p)


def test_partial_results_flushed(tmp_path, monkeypatch):
    path = tmp_path / "partial.csv"
    cfg = replace(SMALL, batch_size=4, output_path=str(path))
    original = _Engine.run
    calls = []

    def failing(self, realizations, keep_final=False):
        calls.append(list(realizations))
        if len(calls) == 2:
            raise ExperimentError("boom", realization=realizations[0], L=2, N=4)
        return original(self, realizations, keep_final)

    monkeypatch.setattr(_Engine, "run", failing)
    with pytest.raises(ExperimentError) as info:
        execute(cfg)
    assert info.value.realization == 4
    partial = read_table_csv(path)
    assert {r.Np for r in partial.rows} == {4}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_reports_realization():
    cfg = replace(SMALL, g="linear:1e200", n_realizations=2)
    with pytest.raises(ExperimentError) as info:
        execute(cfg)
    assert info.value.realization in (0, 1)
    assert info.value.L is not None and info.value.N is not None


def test_deterministic_study_constant_is_exact():
    table = deterministic_convergence_study([2, 4], [4, 8], k=0, m=0)
    assert max(table.column("E_hat")) <= 1e-14


def test_deterministic_study_orders():
    t = deterministic_convergence_study([32], [8, 16, 32])
    assert all(0.8 <= o <= 1.3 for o in t.column("order_time")[1:])
    s = deterministic_convergence_study([4, 8, 16], [4096])
    assert all(1.7 <= o <= 2.3 for o in s.column("order_space")[1:])


def _paired_steps(result):
    rows, errors = result.table.rows, result.errors
    out = []
    for j in range(1, len(rows)):
        d = errors[:, j - 1] - errors[:, j]
        out.append((d.mean(), d.std(ddof=1) / math.sqrt(len(d))))
    return out


@pytest.mark.slow
@pytest.mark.parametrize("name", ["table1_time_desk.cfg", "table1_space_desk.cfg"])
def test_monotone_refinement(name):
    """E_hat decreases along each refinement by at least three paired standard errors."""
    result = desk(name)
    assert result.table.rows[0].Np >= 500
    for mean, se in _paired_steps(result):
        assert mean >= 3 * se
