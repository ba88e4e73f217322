"""Admissible finite volume meshes carrying two-point flux geometry.

A :class:`Mesh` stores only what the TPFA scheme needs: cell centers and
measures, and for every interior edge the pair of adjacent cells, the edge
measure and the distance between the two centers. Boundary edges are not
stored since the homogeneous Neumann scheme never references them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

Box = tuple[tuple[float, float], ...]


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RectGrid:
    """Tensor-product node coordinates of an axis-aligned rectangular grid.

    Cells are numbered row-major with x varying fastest, i.e. the cell in
    column ``ix`` and row ``iy`` has index ``iy * nx + ix``.
    """

    x_nodes: np.ndarray
    y_nodes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x_nodes", _frozen(self.x_nodes))
        object.__setattr__(self, "y_nodes", _frozen(self.y_nodes))

    @property
    def shape(self) -> tuple[int, int]:
        """(ny, nx), the shape of a field reshaped to rows of constant y."""
        return len(self.y_nodes) - 1, len(self.x_nodes) - 1

    @property
    def nx(self) -> int:
        return len(self.x_nodes) - 1

    @property
    def ny(self) -> int:
        return len(self.y_nodes) - 1

    def cell_boxes(self) -> np.ndarray:
        """Array of shape (n, 4) with rows (x0, x1, y0, y1)."""
        x0, x1 = self.x_nodes[:-1], self.x_nodes[1:]
        y0, y1 = self.y_nodes[:-1], self.y_nodes[1:]
        nx, ny = self.nx, self.ny
        return np.column_stack(
            [np.tile(x0, ny), np.tile(x1, ny), np.repeat(y0, nx), np.repeat(y1, nx)]
        )


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable TPFA mesh.

    ``edges[s] = (K, L)`` lists each interior edge once; ``edge_measures`` and
    ``edge_distances`` hold m_sigma and d_{K|L}. ``edge_center_distances[s]``
    holds the distances from x_K and x_L to the edge, used for the regularity
    number. ``grid`` is set by the rectangular builder and enables quadrature
    and exact cross-mesh integration.
    """

    centers: np.ndarray
    measures: np.ndarray
    edges: np.ndarray
    edge_measures: np.ndarray
    edge_distances: np.ndarray
    domain_measure: float
    bbox: Box
    diameters: np.ndarray
    edge_center_distances: np.ndarray | None = None
    max_vertex_degree: int = 0
    grid: RectGrid | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "centers", _frozen(np.atleast_2d(self.centers)))
        object.__setattr__(self, "measures", _frozen(self.measures))
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", _frozen(edges, dtype=np.int64))
        object.__setattr__(self, "edge_measures", _frozen(self.edge_measures))
        object.__setattr__(self, "edge_distances", _frozen(self.edge_distances))
        object.__setattr__(self, "diameters", _frozen(self.diameters))
        if self.edge_center_distances is not None:
            ecd = np.asarray(self.edge_center_distances, dtype=float).reshape(-1, 2)
            object.__setattr__(self, "edge_center_distances", _frozen(ecd))
        object.__setattr__(self, "bbox", tuple((float(lo), float(hi)) for lo, hi in self.bbox))
        object.__setattr__(self, "domain_measure", float(self.domain_measure))

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_cells(self) -> int:
        return len(self.measures)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def transmissibilities(self) -> np.ndarray:
        """m_sigma / d_{K|L} for every interior edge."""
        return self.edge_measures / self.edge_distances

    def __repr__(self):
        kind = f"{self.grid.nx}x{self.grid.ny} grid" if self.grid is not None else "mesh"
        return f"<Mesh {kind}: {self.n_cells} cells, {self.n_edges} interior edges>"


@dataclass(frozen=True)
class MeshRegularity:
    h: float
    reg: float
    edge_count_max: int
    degenerate: bool = False


def _normalize_bbox(bbox) -> Box:
    box = tuple(tuple(float(v) for v in side) for side in bbox)
    if len(box) != 2 or any(len(side) != 2 for side in box):
        raise ValueError(f"bbox must be ((x0, x1), (y0, y1)), got {bbox!r}")
    for lo, hi in box:
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise ValueError(f"degenerate bbox side ({lo}, {hi})")
    return box


def build_rect_mesh(n: int | Sequence[int], bbox=((-1.0, 1.0), (-1.0, 1.0))) -> Mesh:
    """Uniform grid of ``nx * ny`` congruent rectangles over ``bbox``.

    ``n`` is either the number of cells per axis or a pair ``(nx, ny)``.
    """
    nx, ny = (n, n) if np.isscalar(n) else tuple(n)
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"cell counts per axis must be positive integers, got {n!r}")
    nx, ny = int(nx), int(ny)
    (x0, x1), (y0, y1) = box = _normalize_bbox(bbox)
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny

    x_nodes = x0 + dx * np.arange(nx + 1)
    y_nodes = y0 + dy * np.arange(ny + 1)
    x_nodes[-1], y_nodes[-1] = x1, y1
    xc = x0 + dx * (np.arange(nx) + 0.5)
    yc = y0 + dy * (np.arange(ny) + 0.5)
    centers = np.column_stack([np.tile(xc, ny), np.repeat(yc, nx)])

    idx = np.arange(nx * ny).reshape(ny, nx)
    horiz = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    vert = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    edges = np.vstack([horiz, vert]).astype(np.int64)
    nh, nv = len(horiz), len(vert)
    edge_measures = np.concatenate([np.full(nh, dy), np.full(nv, dx)])
    edge_distances = np.concatenate([np.full(nh, dx), np.full(nv, dy)])
    ecd = np.concatenate([np.full((nh, 2), dx / 2), np.full((nv, 2), dy / 2)])

    if nx >= 2 and ny >= 2:
        degree = 4
    elif nx >= 2 or ny >= 2:
        degree = 3
    else:
        degree = 2

    return Mesh(
        centers=centers,
        measures=np.full(nx * ny, dx * dy),
        edges=edges,
        edge_measures=edge_measures,
        edge_distances=edge_distances,
        domain_measure=(x1 - x0) * (y1 - y0),
        bbox=box,
        diameters=np.full(nx * ny, np.hypot(dx, dy)),
        edge_center_distances=ecd,
        max_vertex_degree=degree,
        grid=RectGrid(x_nodes, y_nodes),
    )


def mesh_regularity(mesh: Mesh) -> MeshRegularity:
    """Mesh size h and the regularity number reg(T).

    reg = max(N, max diam(K) / d(x_K, sigma)) where N is the largest number of
    mesh edges meeting at a vertex (recorded by the builder) and the inner max
    runs over cells and their stored interior edges. A mesh without interior
    edges is reported as degenerate with reg = 0.
    """
    h = float(mesh.diameters.max())
    if mesh.n_edges == 0:
        return MeshRegularity(h=h, reg=0.0, edge_count_max=0, degenerate=True)
    counts = np.bincount(mesh.edges.ravel(), minlength=mesh.n_cells)
    if mesh.edge_center_distances is None:
        # lower bound only: d(x_K, sigma) <= d_{K|L}
        ratio = float((mesh.diameters[mesh.edges].max(axis=1) / mesh.edge_distances).max())
    else:
        ratio = float((mesh.diameters[mesh.edges] / mesh.edge_center_distances).max())
    return MeshRegularity(
        h=h,
        reg=max(float(mesh.max_vertex_degree), ratio),
        edge_count_max=int(counts.max()),
    )


def validate_mesh(mesh: Mesh) -> list[str]:
    """List every violated mesh invariant; empty when the mesh is admissible."""
    problems = []
    n = mesh.n_cells
    m = mesh.measures
    for k in np.flatnonzero(~(np.isfinite(m) & (m > 0))):
        problems.append(f"cell {k}: measure {m[k]!r} is not positive")
    if mesh.centers.shape[0] != n:
        problems.append(f"{mesh.centers.shape[0]} centers for {n} cells")

    edges = mesh.edges
    for name, arr in (("edge measure", mesh.edge_measures), ("center distance", mesh.edge_distances)):
        if len(arr) != len(edges):
            problems.append(f"{len(arr)} values of {name} for {len(edges)} edges")
            continue
        for s in np.flatnonzero(~(np.isfinite(arr) & (arr > 0))):
            problems.append(f"edge {s} ({edges[s, 0]}, {edges[s, 1]}): {name} {arr[s]!r} is not positive")
    for s in np.flatnonzero(edges[:, 0] == edges[:, 1]):
        problems.append(f"edge {s}: cell {edges[s, 0]} is its own neighbour")
    for s in np.flatnonzero((edges < 0).any(axis=1) | (edges >= n).any(axis=1)):
        problems.append(f"edge {s}: cell index out of range ({edges[s, 0]}, {edges[s, 1]})")

    seen = {}
    for s, (a, b) in enumerate(edges.tolist()):
        key = (min(a, b), max(a, b))
        if key in seen:
            problems.append(f"edge {s}: duplicate of edge {seen[key]} for pair {key}")
        else:
            seen[key] = s

    total = float(np.sum(m))
    if not np.isclose(total, mesh.domain_measure, rtol=1e-12, atol=0.0):
        problems.append(f"cell measures sum to {total!r}, domain measure is {mesh.domain_measure!r}")

    if mesh.grid is not None and not problems:
        diff = mesh.centers[edges[:, 1]] - mesh.centers[edges[:, 0]]
        off_axis = np.count_nonzero(diff != 0.0, axis=1) != 1
        for s in np.flatnonzero(off_axis):
            problems.append(f"edge {s}: centers not axis-aligned")
        dist = np.abs(diff).sum(axis=1)
        for s in np.flatnonzero(~np.isclose(dist, mesh.edge_distances, rtol=1e-12, atol=0.0)):
            problems.append(f"edge {s}: d_KL {mesh.edge_distances[s]!r} != center distance {dist[s]!r}")
    return problems


def format_mesh(mesh: Mesh) -> str:
    """Plain-text dump, one ``cell`` line per cell then one ``edge`` line per edge."""
    if mesh.dim != 2:
        raise ValueError("mesh dump is defined for 2-d meshes")
    lines = [
        f"cell {k} {cx!r} {cy!r} {mk!r}"
        for k, ((cx, cy), mk) in enumerate(zip(mesh.centers.tolist(), mesh.measures.tolist()))
    ]
    lines += [
        f"edge {a} {b} {ms!r} {d!r}"
        for (a, b), ms, d in zip(mesh.edges.tolist(), mesh.edge_measures.tolist(), mesh.edge_distances.tolist())
    ]
    return "\n".join(lines) + "\n"


def write_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(format_mesh(mesh))
