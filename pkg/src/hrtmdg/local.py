"""Element matrices of the hybridized system and their static condensation.

Per element the unknowns are RT_k flux coefficients ``s``, P_k scalar
coefficients ``c`` and the multiplier coefficients ``l`` on the element's
interior edges. The element contributes to::

    [ A    B   D ] [s]   [F1]
    [ B^H  E   0 ] [c] = [F2]
    [ D^H  0   0 ] [l]   [ 0]   (third row summed over elements)

with A = i kappa (phi_j, phi_i), B = -(psi_j, div phi_i),
D = <chi_m, phi_i . n>, E = -i kappa (psi_j, psi_i), F1 = -<g, phi_i . n>
on boundary edges and F2 = -(f, psi_j), f = i f~ / kappa.

Physical bases: phi = Piola(phi_hat), psi = psi_hat o F^{-1} / sqrt(det B)
(so the P_k mass matrix is the identity), chi = chi_hat(t) / sqrt(|e|) with
t running from the lower to the higher global vertex index of the edge.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .mesh import LOCAL_EDGES
from .refelem import DegenerateCellError, _tables, quadrature_triangle

RCOND_MIN = 1e-12


class LocalResonanceError(ArithmeticError):
    def __init__(self, cell, kappa, rcond):
        super().__init__(f"local resonance on cell {cell} at kappa={kappa:g} (rcond {rcond:.2e})")
        self.cell = cell
        self.kappa = kappa
        self.rcond = rcond


class DataEvaluationError(RuntimeError):
    def __init__(self, cell, what, err):
        super().__init__(f"evaluating {what} on cell {cell} failed: {err}")
        self.cell = cell


@dataclass(frozen=True)
class CellGeometry:
    index: int
    vertices: np.ndarray  # (3, 2)
    B: np.ndarray
    b: np.ndarray
    det: float
    edges: np.ndarray  # global edge index per local edge
    lengths: np.ndarray
    flipped: np.ndarray  # bool per local edge
    boundary: np.ndarray  # bool per local edge
    slots: tuple  # per local edge: global multiplier dofs or None

    @property
    def B_inv_t(self):
        return np.linalg.inv(self.B).T

    def to_physical(self, ref_points):
        return ref_points @ self.B.T + self.b


def cell_geometry(mesh, c, k):
    verts = mesh.vertices[mesh.cells[c]]
    B = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
    det = B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]
    if not det > 0:
        raise DegenerateCellError(f"cell {c} has non-positive Jacobian {det:g}")
    edges = mesh.cell_edges[c]
    slots = []
    for e in edges:
        j = mesh.interior_index[e]
        slots.append(None if j < 0 else np.arange(j * (k + 1), (j + 1) * (k + 1)))
    return CellGeometry(
        index=c, vertices=verts, B=B, b=verts[0].copy(), det=float(det), edges=edges,
        lengths=mesh.edge_lengths[edges],
        flipped=np.array([mesh.edge_flipped(c, l) for l in range(3)]),
        boundary=mesh.boundary[edges], slots=tuple(slots),
    )


@dataclass(frozen=True)
class LocalBlocks:
    cell: int
    kappa: float
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    multiplier_slots: np.ndarray


def _edge_chi(tabs, geom, l):
    chi = tabs.chi_rev if geom.flipped[l] else tabs.chi
    return chi / np.sqrt(geom.lengths[l])


def assemble_local_blocks(geom, ref, kappa, source=None, boundary=None, data_degree=None, d_sign=1.0):
    """Element blocks for one cell.

    ``source`` evaluates f~ and ``boundary`` evaluates g at physical points
    ``(x, y)``; either may be None for zero data. Data functionals use a
    quadrature of degree ``data_degree`` (default 2k + 6).
    """
    k = ref.k
    tabs = ref.tables
    w = ref.quad_cell.weights
    Bk, det = geom.B, geom.det

    phys = np.einsum("ab,iqb->iqa", Bk, tabs.phi)
    A = 1j * kappa * np.einsum("q,iqa,jqa->ij", w, phys, phys) / det
    Bm = -np.einsum("q,iq,jq->ij", w, tabs.div_phi, tabs.psi) / np.sqrt(det)
    E = -1j * kappa * np.einsum("q,iq,jq->ij", w, tabs.psi, tabs.psi)

    D_cols = []
    slots = []
    for l in range(3):
        if geom.slots[l] is None:
            continue
        chi = _edge_chi(tabs, geom, l)
        D_cols.append(np.einsum("q,iq,mq->im", tabs.edge_w, tabs.edge_phi_n[l], chi))
        slots.append(geom.slots[l])
    n_rt = ref.n_rt
    D = d_sign * (np.hstack(D_cols) if D_cols else np.zeros((n_rt, 0)))
    slots = np.concatenate(slots) if slots else np.zeros(0, dtype=np.int64)

    if data_degree is None:
        data_degree = 2 * k + 6
    dtabs = _tables(k, max(data_degree, 2 * k + 2))
    F1 = np.zeros(n_rt, dtype=complex)
    F2 = np.zeros(ref.n_pk, dtype=complex)
    if boundary is not None:
        for l in range(3):
            if not geom.boundary[l]:
                continue
            i, j = LOCAL_EDGES[l]
            pts = geom.vertices[i] + np.outer(dtabs.edge_t, geom.vertices[j] - geom.vertices[i])
            try:
                gv = np.asarray(boundary(pts[:, 0], pts[:, 1]), dtype=complex)
            except Exception as err:  # noqa: BLE001 - re-raised with the cell id
                raise DataEvaluationError(geom.index, "boundary data", err) from err
            F1 -= dtabs.edge_phi_n[l] @ (dtabs.edge_w * gv)
    if source is not None:
        cq = quadrature_triangle(max(data_degree, 2 * k + 2))
        pts = geom.to_physical(cq.points)
        try:
            fv = 1j * np.asarray(source(pts[:, 0], pts[:, 1]), dtype=complex) / kappa
        except Exception as err:  # noqa: BLE001
            raise DataEvaluationError(geom.index, "source", err) from err
        F2 -= dtabs.psi @ (cq.weights * fv) * np.sqrt(det)

    return LocalBlocks(geom.index, kappa, A, Bm, D, E, F1, F2, slots)


@dataclass(frozen=True)
class CondensationCache:
    M: np.ndarray
    M_factor: tuple
    S: np.ndarray
    G_local: np.ndarray
    E_inv: np.ndarray
    Minv_D: np.ndarray
    Minv_r: np.ndarray
    rcond: float


def condense(blocks):
    """Eliminate flux and scalar unknowns; raise :class:`LocalResonanceError`
    when M = A - B E^{-1} B^H is numerically singular."""
    Bh = blocks.B.conj().T
    Dh = blocks.D.conj().T
    E_inv = np.linalg.inv(blocks.E)
    M = blocks.A - blocks.B @ E_inv @ Bh
    s = np.linalg.svd(M, compute_uv=False)
    rcond = s[-1] / s[0] if s[0] > 0 else 0.0
    if not rcond >= RCOND_MIN:
        raise LocalResonanceError(blocks.cell, blocks.kappa, rcond)
    factor = sla.lu_factor(M)
    Minv_D = sla.lu_solve(factor, blocks.D.astype(complex))
    Minv_r = sla.lu_solve(factor, blocks.F1 - blocks.B @ (E_inv @ blocks.F2))
    return CondensationCache(M, factor, Dh @ Minv_D, Dh @ Minv_r, E_inv, Minv_D, Minv_r, rcond)


def back_substitute(lam, cache, blocks):
    """Element flux and scalar coefficients from the local multiplier values."""
    lam = np.asarray(lam)
    if lam.shape != (blocks.D.shape[1],):
        raise ValueError(f"expected {blocks.D.shape[1]} multiplier values, got shape {lam.shape}")
    sigma = cache.Minv_r - cache.Minv_D @ lam
    u = cache.E_inv @ (blocks.F2 - blocks.B.conj().T @ sigma)
    return sigma, u


def block_matrix(blocks):
    """Dense local 3x3 block matrix and right-hand side (for oracles)."""
    n_rt, n_p, n_l = blocks.A.shape[0], blocks.E.shape[0], blocks.D.shape[1]
    K = np.zeros((n_rt + n_p + n_l,) * 2, dtype=complex)
    K[:n_rt, :n_rt] = blocks.A
    K[:n_rt, n_rt:n_rt + n_p] = blocks.B
    K[:n_rt, n_rt + n_p:] = blocks.D
    K[n_rt:n_rt + n_p, :n_rt] = blocks.B.conj().T
    K[n_rt:n_rt + n_p, n_rt:n_rt + n_p] = blocks.E
    K[n_rt + n_p:, :n_rt] = blocks.D.conj().T
    rhs = np.concatenate([blocks.F1, blocks.F2, np.zeros(n_l)])
    return K, rhs
