"""Piecewise constant fields on a mesh, discrete norms and projections."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from fvshe.mesh import Mesh, RectGrid

# 1-d interval overlaps shorter than this fraction of a cell width are dropped
OVERLAP_RTOL = 1e-14


@dataclass(frozen=True, eq=False)
class Field:
    """Values w_K of a piecewise constant function, one per control volume."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True).reshape(-1)
        if values.shape[0] != self.mesh.n_cells:
            raise ValueError(f"field has {values.shape[0]} values for {self.mesh.n_cells} cells")
        if not np.all(np.isfinite(values)):
            bad = np.flatnonzero(~np.isfinite(values))
            raise ValueError(f"non-finite field values in cells {bad[:10].tolist()}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def _other(self, other):
        if isinstance(other, Field):
            if other.mesh is not self.mesh:
                raise ValueError("fields live on different meshes")
            return other.values
        return other

    def __add__(self, other):
        return Field(self.mesh, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Field(self.mesh, self.values - self._other(other))

    def __rsub__(self, other):
        return Field(self.mesh, self._other(other) - self.values)

    def __mul__(self, alpha):
        if isinstance(alpha, Field):
            return NotImplemented
        return Field(self.mesh, float(alpha) * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.mesh, -self.values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class ScalarFunction2D:
    """Vectorised map (x, y) -> value with an optional Laplacian."""

    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    laplacian: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    name: str = ""

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(self.func(x, y), np.broadcast(x, y).shape).astype(float)

    def lap(self, x, y):
        if self.laplacian is None:
            raise ValueError(f"function {self.name or self.func!r} has no Laplacian")
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(self.laplacian(x, y), np.broadcast(x, y).shape).astype(float)


def _p(x):
    return x**4 + 4 * x**3 - 2 * x**2 - 12 * x


def _q(y):
    return y**4 - 8.0 / 3.0 * y**3 - 2 * y**2 + 8 * y


def quartic_initial_value() -> ScalarFunction2D:
    """Quartic initial value on (-1, 1)^2 with zero normal derivative on the boundary."""
    return ScalarFunction2D(
        func=lambda x, y: _p(x) * _q(y) / 16.0,
        laplacian=lambda x, y: (
            (12 * x**2 + 24 * x - 4) * _q(y) + _p(x) * (12 * y**2 - 16 * y - 4)
        ) / 16.0,
        name="paper-poly",
    )


def neumann_eigenfunction(k: int, m: int, bbox=((-1.0, 1.0), (-1.0, 1.0))) -> ScalarFunction2D:
    """cos(k pi (x - x0) / lx) cos(m pi (y - y0) / ly), a Neumann Laplacian eigenfunction."""
    (x0, x1), (y0, y1) = bbox
    ax = k * math.pi / (x1 - x0)
    ay = m * math.pi / (y1 - y0)
    lam = ax**2 + ay**2
    f = lambda x, y: np.cos(ax * (x - x0)) * np.cos(ay * (y - y0))  # noqa: E731
    return ScalarFunction2D(
        func=f,
        laplacian=lambda x, y: -lam * f(x, y),
        name=f"eigen:{k},{m}",
    )


def eigenvalue(k: int, m: int, bbox=((-1.0, 1.0), (-1.0, 1.0))) -> float:
    (x0, x1), (y0, y1) = bbox
    return (k * math.pi / (x1 - x0)) ** 2 + (m * math.pi / (y1 - y0)) ** 2


def constant(c: float) -> ScalarFunction2D:
    return ScalarFunction2D(func=lambda x, y: np.full(np.broadcast(x, y).shape, float(c)),
                            laplacian=lambda x, y: np.zeros(np.broadcast(x, y).shape),
                            name=f"const:{c!r}")


def resolve_function(name: str, bbox=((-1.0, 1.0), (-1.0, 1.0))) -> ScalarFunction2D:
    """Look up a builtin function by its config name.

    Accepted names: ``paper-poly``, ``eigen:k,m`` and ``const:c``.
    """
    name = name.strip()
    if name == "paper-poly":
        return quartic_initial_value()
    if name.startswith("eigen:"):
        try:
            k, m = (int(v) for v in name[len("eigen:"):].split(","))
        except ValueError:
            raise ValueError(f"bad eigenfunction spec {name!r}, expected eigen:k,m") from None
        if k < 0 or m < 0:
            raise ValueError(f"eigenfunction indices must be non-negative in {name!r}")
        return neumann_eigenfunction(k, m, bbox)
    if name.startswith("const:"):
        return constant(float(name[len("const:"):]))
    raise ValueError(f"unknown function {name!r}")


def _require_grid(mesh: Mesh) -> RectGrid:
    if mesh.grid is None:
        raise ValueError("operation needs a rectangular grid mesh")
    return mesh.grid


def _cell_quadrature(mesh: Mesh, order: int):
    """Tensor Gauss-Legendre points and weights per cell, shapes (n, order**2)."""
    if int(order) != order or order < 1:
        raise ValueError(f"quadrature order must be a positive integer, got {order!r}")
    boxes = _require_grid(mesh).cell_boxes()
    t, wt = np.polynomial.legendre.leggauss(int(order))
    cx = 0.5 * (boxes[:, 0] + boxes[:, 1])
    hx = 0.5 * (boxes[:, 1] - boxes[:, 0])
    cy = 0.5 * (boxes[:, 2] + boxes[:, 3])
    hy = 0.5 * (boxes[:, 3] - boxes[:, 2])
    px = cx[:, None] + hx[:, None] * t[None, :]
    py = cy[:, None] + hy[:, None] * t[None, :]
    X = np.repeat(px, order, axis=1)
    Y = np.tile(py, (1, order))
    W = (hx * hy)[:, None] * np.outer(wt, wt).ravel()[None, :]
    return X, Y, W


def cell_integrals(f: Callable, mesh: Mesh, quadrature_order: int = 4) -> np.ndarray:
    """Approximate the integral of ``f`` over every cell."""
    X, Y, W = _cell_quadrature(mesh, quadrature_order)
    return np.sum(np.asarray(f(X, Y), dtype=float) * W, axis=1)


def cell_average_project(f: ScalarFunction2D, mesh: Mesh, quadrature_order: int = 4) -> Field:
    """w_K = (1/m_K) * integral of f over K, by tensor Gauss quadrature."""
    return Field(mesh, cell_integrals(f, mesh, quadrature_order) / mesh.measures)


def centered_project(f: ScalarFunction2D, mesh: Mesh) -> Field:
    """w_K = f(x_K)."""
    return Field(mesh, f(mesh.centers[:, 0], mesh.centers[:, 1]))


def discrete_l2_norm(w: Field) -> float:
    return math.sqrt(float(np.dot(w.mesh.measures, w.values**2)))


def discrete_h1_seminorm(w: Field, mesh: Mesh | None = None) -> float:
    mesh = w.mesh if mesh is None else mesh
    if mesh.n_cells != len(w.values):
        raise ValueError("field does not live on this mesh")
    if mesh.n_edges == 0:
        return 0.0
    jump = w.values[mesh.edges[:, 0]] - w.values[mesh.edges[:, 1]]
    return math.sqrt(float(np.dot(mesh.transmissibilities, jump**2)))


def mean_value(w: Field) -> float:
    return float(np.dot(w.mesh.measures, w.values)) / w.mesh.domain_measure


def l2_distance_to_function(w: Field, f: ScalarFunction2D, quadrature_order: int = 6) -> float:
    """L2(domain) distance between the piecewise constant ``w`` and ``f``."""
    X, Y, W = _cell_quadrature(w.mesh, quadrature_order)
    diff = f(X, Y) - w.values[:, None]
    return math.sqrt(float(np.sum(diff**2 * W)))


def _overlaps(a: np.ndarray, b: np.ndarray):
    """Index pairs and lengths of overlapping intervals of two 1-d partitions."""
    lo = np.maximum(a[:-1, None], b[None, :-1])
    hi = np.minimum(a[1:, None], b[None, 1:])
    length = hi - lo
    width = np.minimum(np.diff(a)[:, None], np.diff(b)[None, :])
    i, j = np.nonzero(length > OVERLAP_RTOL * width)
    return i, j, length[i, j]


def _check_same_box(m1: Mesh, m2: Mesh):
    for s1, s2 in zip(m1.bbox, m2.bbox):
        for v1, v2 in zip(s1, s2):
            if abs(v1 - v2) > 1e-12 * max(1.0, abs(v1), abs(v2)):
                raise ValueError(f"bounding boxes differ: {m1.bbox} vs {m2.bbox}")


class CrossMeshIntegrator:
    """Exact squared L2 distance between piecewise constants on two grids.

    The two grids are intersected once; :meth:`squared_errors` then handles a
    batch of value arrays, one row per realization.
    """

    def __init__(self, mesh1: Mesh, mesh2: Mesh):
        g1, g2 = _require_grid(mesh1), _require_grid(mesh2)
        _check_same_box(mesh1, mesh2)
        self.mesh1, self.mesh2 = mesh1, mesh2
        self._shape1, self._shape2 = g1.shape, g2.shape
        self._ix1, self._ix2, ox = _overlaps(g1.x_nodes, g2.x_nodes)
        self._iy1, self._iy2, oy = _overlaps(g1.y_nodes, g2.y_nodes)
        self._weights = np.outer(oy, ox)

    def squared_errors(self, values1: np.ndarray, values2: np.ndarray) -> np.ndarray:
        v1 = np.asarray(values1, dtype=float)
        v2 = np.asarray(values2, dtype=float)
        single = v1.ndim == 1
        v1 = v1.reshape((-1,) + self._shape1)
        v2 = v2.reshape((-1,) + self._shape2)
        a = v1[:, self._iy1][:, :, self._ix1]
        b = v2[:, self._iy2][:, :, self._ix2]
        contrib = (a - b) ** 2 * self._weights
        out = np.sum(contrib.reshape(len(contrib), -1), axis=1)
        return out[0] if single else out


def cross_mesh_l2_error(w1: Field, w2: Field) -> float:
    """Exact squared L2 norm of w1 - w2 for fields on two grids over one box."""
    return float(CrossMeshIntegrator(w1.mesh, w2.mesh).squared_errors(w1.values, w2.values))


def write_field_csv(w: Field, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell_id", "value"])
        for k, v in enumerate(w.values.tolist()):
            writer.writerow([k, repr(v)])


def read_field_csv(path, mesh: Mesh) -> Field:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["cell_id", "value"]:
        raise ValueError(f"{path}: expected header 'cell_id,value'")
    values = np.empty(mesh.n_cells)
    seen = np.zeros(mesh.n_cells, dtype=bool)
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            k, v = int(row[0]), float(row[1])
        except (ValueError, IndexError):
            raise ValueError(f"{Path(path)}:{lineno}: malformed row {row!r}") from None
        if not 0 <= k < mesh.n_cells:
            raise ValueError(f"{Path(path)}:{lineno}: cell id {k} out of range")
        values[k] = v
        seen[k] = True
    if not seen.all():
        raise ValueError(f"{path}: missing values for {int((~seen).sum())} cells")
    return Field(mesh, values)
