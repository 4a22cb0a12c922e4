"""Conforming triangulations with oriented edges.

Edges carry a single global unit normal: for an interior edge it points
from the lower-indexed incident cell into the higher-indexed one, for a
boundary edge it points out of the domain. ``cell_edge_signs[c, l]`` is +1
when the global normal of local edge ``l`` is outward for cell ``c``.

Local edge ``l`` of a cell is the edge opposite local vertex ``l``, walked
counterclockwise: edge 0 = (v1, v2), edge 1 = (v2, v0), edge 2 = (v0, v1).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

LOCAL_EDGES = ((1, 2), (2, 0), (0, 1))


class MeshParseError(ValueError):
    """Malformed mesh text; carries 1-based line and column."""

    def __init__(self, message, line, column=1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class MeshTopologyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (V, 2)
    cells: np.ndarray  # (C, 3), counterclockwise
    edges: np.ndarray  # (E, 2), vertex indices a < b
    edge_cells: np.ndarray  # (E, 2), second entry -1 on the boundary
    edge_normals: np.ndarray  # (E, 2)
    edge_lengths: np.ndarray  # (E,)
    boundary: np.ndarray  # (E,) bool
    cell_edges: np.ndarray  # (C, 3)
    cell_edge_signs: np.ndarray  # (C, 3) of +-1
    reoriented: int = 0
    interior_edges: np.ndarray = field(init=False)
    interior_index: np.ndarray = field(init=False)

    def __post_init__(self):
        interior = np.flatnonzero(~self.boundary)
        index = np.full(len(self.edges), -1, dtype=np.int64)
        index[interior] = np.arange(len(interior))
        object.__setattr__(self, "interior_edges", interior)
        object.__setattr__(self, "interior_index", index)
        for name in ("vertices", "cells", "edges", "edge_cells", "edge_normals",
                     "edge_lengths", "boundary", "cell_edges", "cell_edge_signs",
                     "interior_edges", "interior_index"):
            getattr(self, name).setflags(write=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def n_interior_edges(self):
        return len(self.interior_edges)

    @property
    def h(self):
        return mesh_size(self)

    def cell_vertices(self, c):
        """(3, 2) array of the vertex coordinates of cell ``c``."""
        return self.vertices[self.cells[c]]

    def affine_maps(self):
        """Jacobians ``B`` (C, 2, 2), offsets ``b`` (C, 2) and ``det B`` (C,)."""
        p = self.vertices[self.cells]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        return jac, p[:, 0].copy(), det

    def edge_flipped(self, c, local_edge):
        """True when the cell walks ``local_edge`` against the global a -> b direction."""
        i, j = LOCAL_EDGES[local_edge]
        first = self.cells[c, i]
        return first != self.edges[self.cell_edges[c, local_edge], 0]

    def to_text(self):
        lines = [f"vertices {self.n_vertices}"]
        lines += [f"{x!r} {y!r}" for x, y in self.vertices.tolist()]
        lines.append(f"cells {self.n_cells}")
        lines += [" ".join(str(i) for i in cell) for cell in self.cells.tolist()]
        return "\n".join(lines) + "\n"


def signed_areas(vertices, cells):
    p = vertices[cells]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def from_cells(vertices, cells):
    """Build a :class:`Mesh` from vertex coordinates and cell triples.

    Connectivity is derived from the cells. Clockwise cells are flipped to
    counterclockwise and counted in ``Mesh.reoriented``.
    """
    vertices = np.array(vertices, dtype=float).reshape(-1, 2)
    cells = np.array(cells, dtype=np.int64).reshape(-1, 3)
    if len(cells) == 0:
        raise MeshTopologyError("mesh has no cells")
    if cells.min() < 0 or cells.max() >= len(vertices):
        raise MeshTopologyError("cell references a vertex index out of range")
    if np.any([len(set(c)) < 3 for c in cells.tolist()]):
        raise MeshTopologyError("cell with repeated vertex")

    area = signed_areas(vertices, cells)
    scale = np.max(np.ptp(vertices, axis=0)) ** 2 if len(vertices) > 1 else 1.0
    degenerate = np.flatnonzero(np.abs(area) <= 1e-14 * scale)
    if len(degenerate):
        raise MeshTopologyError(f"degenerate cell {degenerate[0]} (zero area)")
    flip = area < 0
    cells = cells.copy()
    cells[flip] = cells[flip][:, [0, 2, 1]]

    used = np.zeros(len(vertices), dtype=bool)
    used[cells.ravel()] = True
    if not used.all():
        raise MeshTopologyError(f"dangling vertex {np.flatnonzero(~used)[0]}")

    edge_id = {}
    edges = []
    incident = []
    cell_edges = np.empty((len(cells), 3), dtype=np.int64)
    for c, cell in enumerate(cells.tolist()):
        for l, (i, j) in enumerate(LOCAL_EDGES):
            key = (min(cell[i], cell[j]), max(cell[i], cell[j]))
            e = edge_id.get(key)
            if e is None:
                e = edge_id[key] = len(edges)
                edges.append(key)
                incident.append([c])
            else:
                incident[e].append(c)
                if len(incident[e]) > 2:
                    raise MeshTopologyError(f"edge {key} shared by more than two cells")
            cell_edges[c, l] = e

    edges = np.array(edges, dtype=np.int64)
    edge_cells = np.array([inc + [-1] * (2 - len(inc)) for inc in incident], dtype=np.int64)
    boundary = edge_cells[:, 1] < 0

    tangent = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    lengths = np.hypot(tangent[:, 0], tangent[:, 1])
    normals = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1) / lengths[:, None]

    # orient every global normal outward from its lowest-indexed cell
    owner = edge_cells[:, 0]
    mid = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
    centroid = vertices[cells[owner]].mean(axis=1)
    wrong = np.einsum("ij,ij->i", normals, mid - centroid) < 0
    normals[wrong] *= -1

    signs = np.where(edge_cells[cell_edges, 0] == np.arange(len(cells))[:, None], 1, -1)
    return Mesh(vertices, cells, edges, edge_cells, normals, lengths, boundary,
                cell_edges, signs.astype(np.int64), int(flip.sum()))


def generate_structured(n):
    """Uniform mesh of the unit square: n x n squares, each cut along its
    lower-left to upper-right diagonal."""
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)
    cells = []
    for j in range(n):
        for i in range(n):
            v00 = j * (n + 1) + i
            v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
    return from_cells(vertices, cells)


_TOKEN = re.compile(r"\S+")


def _tokens(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        toks = [(m.group(), m.start() + 1) for m in _TOKEN.finditer(line)]
        if toks:
            yield lineno, toks


def _parse_number(tok, col, lineno, kind):
    try:
        return kind(tok)
    except ValueError:
        raise MeshParseError(f"expected {kind.__name__}, got {tok!r}", lineno, col) from None


def import_mesh(text):
    """Parse the ASCII mesh format and rebuild connectivity from the cells.

    Format: ``vertices V`` then V lines ``x y``; ``cells C`` then C lines
    ``i j k`` with 0-based vertex indices. ``#`` starts a comment.
    """
    lines = list(_tokens(text))
    pos = 0
    last_line = lines[-1][0] if lines else 1

    def header(keyword):
        nonlocal pos
        if pos >= len(lines):
            raise MeshParseError(f"missing '{keyword}' header", last_line)
        lineno, toks = lines[pos]
        if len(toks) != 2 or toks[0][0] != keyword:
            raise MeshParseError(f"expected '{keyword} <count>'", lineno, toks[0][1])
        count = _parse_number(toks[1][0], toks[1][1], lineno, int)
        if count < 0:
            raise MeshParseError("negative count", lineno, toks[1][1])
        pos += 1
        return count

    def rows(count, width, kind):
        nonlocal pos
        out = []
        for _ in range(count):
            if pos >= len(lines):
                raise MeshParseError("unexpected end of file", last_line)
            lineno, toks = lines[pos]
            if len(toks) != width:
                raise MeshParseError(f"expected {width} values, got {len(toks)}", lineno, toks[0][1])
            out.append([_parse_number(t, c, lineno, kind) for t, c in toks])
            pos += 1
        return out

    nv = header("vertices")
    verts = rows(nv, 2, float)
    nc = header("cells")
    cells = rows(nc, 3, int)
    if pos < len(lines):
        lineno, toks = lines[pos]
        raise MeshParseError("trailing content", lineno, toks[0][1])
    for c, cell in enumerate(cells):
        if min(cell) < 0 or max(cell) >= nv:
            raise MeshTopologyError(f"cell {c} references a vertex index out of range")
    return from_cells(np.array(verts, dtype=float).reshape(-1, 2), cells)


def export_mesh(mesh):
    return mesh.to_text()


def mesh_size(mesh):
    """Largest cell diameter (longest edge over all cells)."""
    return float(mesh.edge_lengths[mesh.cell_edges].max())
