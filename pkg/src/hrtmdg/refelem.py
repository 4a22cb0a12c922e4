"""Reference-triangle machinery.

The reference triangle is T = {(x, y): x, y >= 0, x + y <= 1} with vertices
(0, 0), (1, 0), (0, 1); the reference edge is [0, 1]. Scalar bases are
L2-orthonormal (Cholesky of the exact monomial Gram matrix, graded-lex
order). The RT_k basis is the dual basis of the standard degrees of freedom:

* edge moments  int_e (tau . n) q ds,  q in the orthonormal P_k(e) basis,
  on local edges 0, 1, 2 (edge l is opposite vertex l, walked
  counterclockwise, parameter t in [0, 1] along the walk)
* interior moments  int_T tau . p,  p = (q, 0) then (0, q) for q in the
  orthonormal P_{k-1}(T) basis.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_DEGREE = 3

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
# start point, direction (end - start), outward unit normal and length
_EDGE_START = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
_EDGE_DIR = np.array([[-1.0, 1.0], [0.0, -1.0], [1.0, 0.0]])
REF_NORMALS = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]) / np.array([[np.sqrt(2.0)], [1.0], [1.0]])
REF_EDGE_LENGTHS = np.array([np.sqrt(2.0), 1.0, 1.0])


class UnsupportedDegreeError(ValueError):
    pass


class DegenerateCellError(ValueError):
    pass


# --------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self):
        return len(self.weights)


MAX_QUAD_DEGREE = 60


@lru_cache(maxsize=None)
def quadrature_edge(degree):
    """Gauss-Legendre rule on [0, 1] exact to ``degree``."""
    if degree < 0 or degree > MAX_QUAD_DEGREE:
        raise ValueError(f"edge quadrature degree {degree} outside [0, {MAX_QUAD_DEGREE}]")
    m = degree // 2 + 1
    x, w = roots_legendre(m)
    rule = QuadratureRule(0.5 * (x + 1.0), 0.5 * w, degree)
    rule.points.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


@lru_cache(maxsize=None)
def quadrature_triangle(degree):
    """Collapsed (Duffy) Gauss rule on the reference triangle.

    Gauss-Jacobi(1, 0) in the collapsed direction absorbs the Jacobian, so
    m x m points with m = degree // 2 + 1 integrate P_degree exactly. All
    weights are positive and sum to 1/2.
    """
    if degree < 0 or degree > MAX_QUAD_DEGREE:
        raise ValueError(f"triangle quadrature degree {degree} outside [0, {MAX_QUAD_DEGREE}]")
    m = degree // 2 + 1
    a, wa = roots_jacobi(m, 1.0, 0.0)  # weight (1 - a) on [-1, 1]
    b, wb = roots_legendre(m)
    s = 0.5 * (a + 1.0)  # collapsed coordinate, weight (1 - s)
    t = 0.5 * (b + 1.0)
    S, T = np.meshgrid(s, t, indexing="ij")
    x = S.ravel()
    y = ((1.0 - S) * T).ravel()
    w = (np.outer(wa, wb) * 0.125).ravel()
    rule = QuadratureRule(np.stack([x, y], axis=1), w, degree)
    rule.points.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


def monomial_integral(a, b):
    """Exact integral of x^a y^b over the reference triangle."""
    return factorial(a) * factorial(b) / factorial(a + b + 2)


# --------------------------------------------------------------------------
# scalar bases


def graded_exponents(k):
    """Monomial exponents (a, b) of P_k in graded-lex order."""
    return [(d - j, j) for d in range(k + 1) for j in range(d + 1)]


@lru_cache(maxsize=None)
def _cell_coefficients(k):
    exps = graded_exponents(k)
    gram = np.array([[monomial_integral(a1 + a2, b1 + b2) for a2, b2 in exps] for a1, b1 in exps])
    L = np.linalg.cholesky(gram)
    # psi_i = sum_j C[j, i] m_j with C = L^{-T}
    return np.linalg.inv(L).T


@lru_cache(maxsize=None)
def _edge_coefficients(k):
    gram = np.array([[1.0 / (i + j + 1) for j in range(k + 1)] for i in range(k + 1)])
    L = np.linalg.cholesky(gram)
    return np.linalg.inv(L).T


def _monomials(points, k):
    x, y = points[:, 0], points[:, 1]
    return np.stack([x**a * y**b for a, b in graded_exponents(k)])


def _monomial_grads(points, k):
    x, y = points[:, 0], points[:, 1]
    gx, gy = [], []
    for a, b in graded_exponents(k):
        gx.append(a * x ** max(a - 1, 0) * y**b if a else np.zeros_like(x))
        gy.append(b * x**a * y ** max(b - 1, 0) if b else np.zeros_like(y))
    return np.stack([np.stack(gx), np.stack(gy)], axis=-1)  # (n, P, 2)


def pk_cell_values(k, points):
    """Orthonormal P_k basis on the reference triangle, shape (dim, P)."""
    points = np.atleast_2d(points)
    return _cell_coefficients(k).T @ _monomials(points, k)


def pk_cell_grads(k, points):
    """Gradients of :func:`pk_cell_values`, shape (dim, P, 2)."""
    points = np.atleast_2d(points)
    return np.einsum("ji,jpd->ipd", _cell_coefficients(k), _monomial_grads(points, k))


def pk_edge_values(k, t):
    """Orthonormal P_k basis on [0, 1], shape (k + 1, P)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return _edge_coefficients(k).T @ np.stack([t**a for a in range(k + 1)])


def edge_points(local_edge, t):
    """Reference-triangle points at parameter ``t`` along a local edge."""
    t = np.atleast_1d(t)
    return _EDGE_START[local_edge] + t[:, None] * _EDGE_DIR[local_edge]


# --------------------------------------------------------------------------
# Raviart-Thomas


def _rt_spanning(points, k):
    """Values (N, P, 2) and divergences (N, P) of the spanning set
    [P_k]^2 (+) x * (homogeneous degree-k monomials)."""
    x, y = points[:, 0], points[:, 1]
    vals, divs = [], []
    mono = _monomials(points, k)
    grads = _monomial_grads(points, k)
    zero = np.zeros_like(x)
    for i in range(len(mono)):
        vals.append(np.stack([mono[i], zero], axis=-1))
        divs.append(grads[i, :, 0])
    for i in range(len(mono)):
        vals.append(np.stack([zero, mono[i]], axis=-1))
        divs.append(grads[i, :, 1])
    for j in range(k + 1):
        a, b = k - j, j
        m = x**a * y**b
        vals.append(np.stack([x * m, y * m], axis=-1))
        divs.append((k + 2) * m)
    return np.stack(vals), np.stack(divs)


def rt_dim(k):
    return (k + 1) * (k + 3)


def pk_dim(k):
    return (k + 1) * (k + 2) // 2


def rt_dof_slot(k, local_edge, mode):
    """Index of the RT degree of freedom for an edge moment."""
    return local_edge * (k + 1) + mode


def rt_dof_functionals(k, evaluate, quad_degree):
    """Apply the RT_k degrees of freedom on the reference triangle to a
    vector field ``evaluate(points) -> (..., P, 2)``.

    Returns an array whose first axis runs over the (k+1)(k+3) DOFs.
    """
    out = []
    eq = quadrature_edge(quad_degree)
    q = pk_edge_values(k, eq.points)
    for l in range(3):
        vals = evaluate(edge_points(l, eq.points))
        flux = vals @ REF_NORMALS[l]
        for m in range(k + 1):
            out.append(REF_EDGE_LENGTHS[l] * np.tensordot(flux, eq.weights * q[m], axes=([-1], [0])))
    if k >= 1:
        cq = quadrature_triangle(quad_degree)
        vals = evaluate(cq.points)
        p = pk_cell_values(k - 1, cq.points)
        for comp in range(2):
            for i in range(len(p)):
                out.append(np.tensordot(vals[..., comp], cq.weights * p[i], axes=([-1], [0])))
    return np.stack(out)


@lru_cache(maxsize=None)
def _rt_coefficients(k):
    quad = 2 * k + 2
    span = lambda pts: _rt_spanning(pts, k)[0]
    V = rt_dof_functionals(k, span, quad)  # V[i, j] = dof_i(s_j)
    return np.linalg.inv(V)  # phi_j = sum_l s_l C[l, j]


def rt_values(k, points):
    """RT_k basis values on the reference triangle, shape (N, P, 2)."""
    points = np.atleast_2d(points)
    vals, _ = _rt_spanning(points, k)
    return np.einsum("lj,lpd->jpd", _rt_coefficients(k), vals)


def rt_divergence(k, points):
    """Divergence of the RT_k basis, shape (N, P)."""
    points = np.atleast_2d(points)
    _, divs = _rt_spanning(points, k)
    return _rt_coefficients(k).T @ divs


# --------------------------------------------------------------------------
# maps


def affine_map(vertices):
    """Jacobian, offset and determinant of x = B xhat + b for one cell."""
    vertices = np.asarray(vertices, dtype=float)
    B = np.column_stack([vertices[1] - vertices[0], vertices[2] - vertices[0]])
    det = B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]
    return B, vertices[0].copy(), det


def piola_map(B, values, det=None):
    """Contravariant Piola transform (1/det B) B tau_hat of reference values (..., 2)."""
    B = np.asarray(B, dtype=float)
    if det is None:
        det = B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]
    scale = np.max(np.abs(B)) ** 2
    if not det > 1e-14 * scale:
        raise DegenerateCellError(f"cell Jacobian determinant {det:g} is not positive")
    return np.asarray(values) @ B.T / det


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceElement:
    """Immutable bundle of reference bases and tabulations at quadrature points."""

    k: int
    quad_degree: int
    quad_cell: QuadratureRule
    quad_edge: QuadratureRule

    @property
    def n_pk(self):
        return pk_dim(self.k)

    @property
    def n_edge(self):
        return self.k + 1

    @property
    def n_rt(self):
        return rt_dim(self.k)

    def evaluate(self, which, points):
        """Tabulate a basis at reference points; the first axis runs over basis functions."""
        if which == "pk_cell":
            return pk_cell_values(self.k, points)
        if which == "pk_grad":
            return pk_cell_grads(self.k, points)
        if which == "pk_edge":
            return pk_edge_values(self.k, points)
        if which == "rt_cell":
            return rt_values(self.k, points)
        if which == "rt_div":
            return rt_divergence(self.k, points)
        raise ValueError(f"unknown basis {which!r}")

    @property
    def tables(self):
        return _tables(self.k, self.quad_degree)


@dataclass(frozen=True)
class Tables:
    psi: np.ndarray  # (nP, Q)
    grad_psi: np.ndarray  # (nP, Q, 2)
    phi: np.ndarray  # (nRT, Q, 2)
    div_phi: np.ndarray  # (nRT, Q)
    # per local edge, reference-edge parameter t in the cell's walking direction
    edge_t: np.ndarray  # (Qe,)
    edge_w: np.ndarray  # (Qe,)
    edge_phi_n: np.ndarray  # (3, nRT, Qe) phi . n_hat * |e_hat|  (per unit t)
    edge_psi: np.ndarray  # (3, nP, Qe)
    chi: np.ndarray  # (nE, Qe) chi(t)
    chi_rev: np.ndarray  # (nE, Qe) chi(1 - t)


@lru_cache(maxsize=None)
def _tables(k, quad_degree):
    cq = quadrature_triangle(quad_degree)
    eq = quadrature_edge(quad_degree)
    edge_phi_n, edge_psi = [], []
    for l in range(3):
        pts = edge_points(l, eq.points)
        edge_phi_n.append(REF_EDGE_LENGTHS[l] * (rt_values(k, pts) @ REF_NORMALS[l]))
        edge_psi.append(pk_cell_values(k, pts))
    tabs = Tables(
        psi=pk_cell_values(k, cq.points),
        grad_psi=pk_cell_grads(k, cq.points),
        phi=rt_values(k, cq.points),
        div_phi=rt_divergence(k, cq.points),
        edge_t=np.asarray(eq.points),
        edge_w=np.asarray(eq.weights),
        edge_phi_n=np.stack(edge_phi_n),
        edge_psi=np.stack(edge_psi),
        chi=pk_edge_values(k, eq.points),
        chi_rev=pk_edge_values(k, 1.0 - eq.points),
    )
    for v in vars(tabs).values():
        v.setflags(write=False)
    return tabs


def build_reference(k, quad_degree=None, max_degree=MAX_DEGREE):
    """Reference element of degree ``k`` with quadrature exact to ``quad_degree``
    (default 2k + 2, the minimum allowed)."""
    if not 0 <= k <= max_degree:
        raise UnsupportedDegreeError(f"degree k={k} outside supported range [0, {max_degree}]")
    if quad_degree is None:
        quad_degree = 2 * k + 2
    if quad_degree < 2 * k + 2:
        raise ValueError(f"quad_degree must be >= 2k+2 = {2 * k + 2}")
    return ReferenceElement(k, quad_degree, quadrature_triangle(quad_degree), quadrature_edge(quad_degree))
