import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvshe.mesh import Mesh, build_rect_mesh, format_mesh, mesh_regularity, validate_mesh


def test_grid_40():
    mesh = build_rect_mesh(40, ((-1, 1), (-1, 1)))
    assert mesh.n_cells == 1600
    np.testing.assert_allclose(mesh.measures, 4 / 1600, rtol=1e-15)
    assert mesh_regularity(mesh).h == pytest.approx(math.sqrt(8) / 40, rel=1e-14)


def test_single_cell():
    mesh = build_rect_mesh(1)
    assert mesh.n_cells == 1
    assert mesh.n_edges == 0
    assert mesh.measures[0] == 4.0
    reg = mesh_regularity(mesh)
    assert reg.degenerate and reg.reg == 0.0


def test_two_by_two_enumeration():
    mesh = build_rect_mesh(2, ((0, 1), (0, 1)))
    assert mesh.n_cells == 4
    assert mesh.n_edges == 4
    assert sorted(map(tuple, np.sort(mesh.edges, axis=1).tolist())) == [(0, 1), (0, 2), (1, 3), (2, 3)]
    np.testing.assert_array_equal(mesh.edge_measures, 0.5)
    np.testing.assert_array_equal(mesh.edge_distances, 0.5)
    np.testing.assert_array_equal(mesh.centers, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])


@pytest.mark.parametrize("n, bbox", [(0, ((0, 1), (0, 1))), (-3, ((0, 1), (0, 1))), (2, ((0, 0), (0, 1))),
                                     (2, ((1, 0), (0, 1))), (2.5, ((0, 1), (0, 1)))])
def test_builder_rejects(n, bbox):
    with pytest.raises(ValueError):
        build_rect_mesh(n, bbox)


def test_regularity_square_cells():
    s = 2 / 8
    mesh = build_rect_mesh(8)
    reg = mesh_regularity(mesh)
    assert reg.h == pytest.approx(s * math.sqrt(2), rel=1e-14)
    ratios = mesh.diameters[mesh.edges] / mesh.edge_center_distances
    np.testing.assert_allclose(ratios, 2 * math.sqrt(2), rtol=1e-14)
    assert reg.reg == 4.0  # vertex degree dominates 2*sqrt(2)
    assert reg.edge_count_max == 4


def test_regularity_lower_bound():
    for n in (2, 5, (3, 7)):
        mesh = build_rect_mesh(n, ((0, 3), (-1, 1)))
        reg = mesh_regularity(mesh)
        assert np.all(reg.h / mesh.edge_distances <= reg.reg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20))
def test_refinement_consistency(L):
    a, b = build_rect_mesh(L), build_rect_mesh(2 * L)
    assert mesh_regularity(b).h == pytest.approx(mesh_regularity(a).h / 2, rel=1e-14)
    assert b.n_cells == 4 * a.n_cells


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12),
       st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10))
def test_builder_output_is_valid(nx, ny, x0, lx, y0, ly):
    mesh = build_rect_mesh((nx, ny), ((x0, x0 + lx), (y0, y0 + ly)))
    assert validate_mesh(mesh) == []
    assert math.isclose(mesh.measures.sum(), lx * ly, rel_tol=1e-12)
    edges = {tuple(sorted(e)) for e in mesh.edges.tolist()}
    assert len(edges) == mesh.n_edges


def test_validate_flags_zero_measure():
    good = build_rect_mesh(3)
    m = good.measures.copy()
    m[4] = 0.0
    bad = Mesh(good.centers, m, good.edges, good.edge_measures, good.edge_distances, good.domain_measure,
               good.bbox, good.diameters)
    problems = validate_mesh(bad)
    assert any("cell 4" in p for p in problems)
    assert sum("not positive" in p for p in problems) == 1


def test_validate_flags_duplicate_edge():
    good = build_rect_mesh(3)
    edges = np.vstack([good.edges, good.edges[[2], ::-1]])
    bad = Mesh(good.centers, good.measures, edges, np.append(good.edge_measures, good.edge_measures[2]),
               np.append(good.edge_distances, good.edge_distances[2]), good.domain_measure, good.bbox,
               good.diameters)
    problems = validate_mesh(bad)
    assert len(problems) == 1
    a, b = sorted(good.edges[2].tolist())
    assert f"({a}, {b})" in problems[0]


def test_validate_default_mesh():
    assert validate_mesh(build_rect_mesh(8, ((-1, 1), (-1, 1)))) == []


def test_mesh_is_immutable():
    mesh = build_rect_mesh(3)
    with pytest.raises(ValueError):
        mesh.measures[0] = 1.0
    with pytest.raises(AttributeError):
        mesh.domain_measure = 2.0


def test_transmissibility_independent_of_orientation():
    mesh = build_rect_mesh((3, 2), ((0, 3), (0, 1)))
    flipped = Mesh(mesh.centers, mesh.measures, mesh.edges[:, ::-1], mesh.edge_measures, mesh.edge_distances,
                   mesh.domain_measure, mesh.bbox, mesh.diameters)
    np.testing.assert_array_equal(mesh.transmissibilities, flipped.transmissibilities)


def test_mesh_dump_format():
    text = format_mesh(build_rect_mesh(2, ((0, 1), (0, 1))))
    lines = text.splitlines()
    assert lines[0] == "cell 0 0.25 0.25 0.25"
    assert lines[4] == "edge 0 1 0.5 0.5"
    assert len(lines) == 8
