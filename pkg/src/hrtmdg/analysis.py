"""Projections, norms and verification probes.

A *triple* is the tuple (sigma, u, lambda) of flux, scalar and multiplier.
Triples are compared by tabulating them at quadrature points; see
:func:`tabulate_discrete` and :func:`tabulate_exact`. A tabulation is a
dict with arrays

``sig`` (C, Q, 2), ``u`` (C, Q), ``gu`` (C, Q, 2)
    cell values at the physical images of the cell rule,
``sn``, ``ue``, ``lam`` (C, 3, Qe)
    outward normal flux, scalar trace and multiplier on each local edge, at
    the cell's own walking parameter. ``lam`` is zero on boundary edges.

Inner products follow (a, b) = int a conj(b).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .mesh import LOCAL_EDGES, generate_structured
from .refelem import (_tables, build_reference, pk_cell_values, pk_edge_values, quadrature_edge,
                      quadrature_triangle, rt_dim)

VERIFY_DEGREE = 20
STABILITY_CAP = 4000


# --------------------------------------------------------------------------
# geometry and tabulation


@dataclass(frozen=True)
class MeshGeometry:
    B: np.ndarray
    b: np.ndarray
    det: np.ndarray
    Binv: np.ndarray
    lengths: np.ndarray  # (C, 3)
    flipped: np.ndarray  # (C, 3)
    interior: np.ndarray  # (C, 3) interior edge index or -1
    normals: np.ndarray  # (C, 3, 2) outward
    starts: np.ndarray  # (C, 3, 2)
    ends: np.ndarray  # (C, 3, 2)


@lru_cache(maxsize=16)
def geometry(mesh):
    B, b, det = mesh.affine_maps()
    C = mesh.n_cells
    flipped = np.array([[mesh.edge_flipped(c, l) for l in range(3)] for c in range(C)], dtype=bool)
    verts = mesh.vertices[mesh.cells]
    starts = np.stack([verts[:, i] for i, _ in LOCAL_EDGES], axis=1)
    ends = np.stack([verts[:, j] for _, j in LOCAL_EDGES], axis=1)
    normals = mesh.edge_normals[mesh.cell_edges] * mesh.cell_edge_signs[..., None]
    return MeshGeometry(B, b, det, np.linalg.inv(B), mesh.edge_lengths[mesh.cell_edges], flipped,
                        mesh.interior_index[mesh.cell_edges], normals, starts, ends)


@dataclass(frozen=True)
class Triple:
    """Discrete (sigma_h, u_h, lambda_h) coefficients on a mesh."""

    mesh: object
    k: int
    sigma: np.ndarray  # (C, n_rt)
    u: np.ndarray  # (C, n_p)
    lam: np.ndarray  # (n_interior, k + 1)

    @classmethod
    def of(cls, sol):
        return cls(sol.mesh, sol.k, sol.sigma, sol.u, sol.lam)

    @classmethod
    def zeros(cls, mesh, k):
        return cls(mesh, k, np.zeros((mesh.n_cells, rt_dim(k)), complex),
                   np.zeros((mesh.n_cells, (k + 1) * (k + 2) // 2), complex),
                   np.zeros((mesh.n_interior_edges, k + 1), complex))

    @classmethod
    def from_vector(cls, mesh, k, x):
        C = mesh.n_cells
        n_rt, n_p = rt_dim(k), (k + 1) * (k + 2) // 2
        return cls(mesh, k, x[:C * n_rt].reshape(C, n_rt), x[C * n_rt:C * (n_rt + n_p)].reshape(C, n_p),
                   x[C * (n_rt + n_p):].reshape(-1, k + 1))

    @classmethod
    def random(cls, mesh, k, rng, real=False):
        x = rng.standard_normal(n_unknowns(mesh, k))
        if not real:
            x = x + 1j * rng.standard_normal(len(x))
        return cls.from_vector(mesh, k, x.astype(complex))

    def vector(self):
        return np.concatenate([self.sigma.ravel(), self.u.ravel(), self.lam.ravel()])

    def scaled(self, a_sigma, a_u, a_lam):
        return Triple(self.mesh, self.k, a_sigma * self.sigma, a_u * self.u, a_lam * self.lam)

    def __sub__(self, other):
        return Triple(self.mesh, self.k, self.sigma - other.sigma, self.u - other.u, self.lam - other.lam)

    def __add__(self, other):
        return Triple(self.mesh, self.k, self.sigma + other.sigma, self.u + other.u, self.lam + other.lam)

    def __mul__(self, a):
        return self.scaled(a, a, a)

    __rmul__ = __mul__


def n_unknowns(mesh, k):
    return mesh.n_cells * (rt_dim(k) + (k + 1) * (k + 2) // 2) + mesh.n_interior_edges * (k + 1)


def _lam_at_edges(mesh, geo, k, lam, t):
    """Multiplier values (C, 3, Qe) at cell walking parameters ``t``."""
    chi = pk_edge_values(k, t)
    chi_rev = pk_edge_values(k, 1.0 - t)
    out = np.zeros(geo.interior.shape + (len(t),), dtype=complex)
    mask = geo.interior >= 0
    coeff = np.zeros(geo.interior.shape + (k + 1,), dtype=complex)
    coeff[mask] = lam[geo.interior[mask]]
    fwd = np.einsum("clm,mq->clq", coeff, chi)
    rev = np.einsum("clm,mq->clq", coeff, chi_rev)
    out = np.where(geo.flipped[..., None], rev, fwd) / np.sqrt(geo.lengths)[..., None]
    return np.where(mask[..., None], out, 0.0)


def tabulate_discrete(triple, degree):
    mesh, k = triple.mesh, triple.k
    geo = geometry(mesh)
    tabs = _tables(k, degree)
    sq = np.sqrt(geo.det)
    sig = np.einsum("cab,iqb,ci->cqa", geo.B, tabs.phi, triple.sigma) / geo.det[:, None, None]
    u = np.einsum("iq,ci->cq", tabs.psi, triple.u) / sq[:, None]
    gu = np.einsum("cba,iqb,ci->cqa", geo.Binv, tabs.grad_psi, triple.u) / sq[:, None, None]
    sn = np.einsum("liq,ci->clq", tabs.edge_phi_n, triple.sigma) / geo.lengths[..., None]
    ue = np.einsum("liq,ci->clq", tabs.edge_psi, triple.u) / sq[:, None, None]
    lam = _lam_at_edges(mesh, geo, k, triple.lam, tabs.edge_t)
    return {"sig": sig, "u": u, "gu": gu, "sn": sn, "ue": ue, "lam": lam}


def cell_points(mesh, degree):
    geo = geometry(mesh)
    cq = quadrature_triangle(degree)
    return np.einsum("cab,qb->cqa", geo.B, cq.points) + geo.b[:, None, :]


def edge_points_physical(mesh, degree):
    geo = geometry(mesh)
    t = quadrature_edge(degree).points
    return geo.starts[:, :, None, :] + t[None, None, :, None] * (geo.ends - geo.starts)[:, :, None, :]


def tabulate_exact(mesh, degree, sigma, u, grad_u, lam_on_interior=True):
    """Tabulate an exact triple (sigma, u, lambda = u on interior edges)."""
    geo = geometry(mesh)
    P = cell_points(mesh, degree)
    Pe = edge_points_physical(mesh, degree)
    x, y = P[..., 0], P[..., 1]
    xe, ye = Pe[..., 0], Pe[..., 1]
    sn = np.einsum("clqa,cla->clq", np.asarray(sigma(xe, ye), dtype=complex), geo.normals)
    ue = np.asarray(u(xe, ye), dtype=complex)
    lam = np.where((geo.interior >= 0)[..., None], ue, 0.0) if lam_on_interior else np.zeros_like(ue)
    return {"sig": np.asarray(sigma(x, y), dtype=complex), "u": np.asarray(u(x, y), dtype=complex),
            "gu": np.asarray(grad_u(x, y), dtype=complex), "sn": sn, "ue": ue, "lam": lam}


def tabulate_case(mesh, case, degree):
    return tabulate_exact(mesh, degree, case.sigma, case.u, case.grad)


def tab_sub(a, b):
    return {key: a[key] - b[key] for key in a}


# --------------------------------------------------------------------------
# integrals


def _weights(mesh, degree):
    geo = geometry(mesh)
    W = quadrature_triangle(degree).weights[None, :] * geo.det[:, None]
    ds = quadrature_edge(degree).weights[None, None, :] * geo.lengths[..., None]
    return W, ds


def form_A_tabulated(x, y, kappa, mesh, degree):
    """The sesquilinear form of the method, term by term by quadrature."""
    W, ds = _weights(mesh, degree)
    cy = {key: np.conj(v) for key, v in y.items()}
    cell = (1j * kappa * np.einsum("cqa,cqa->cq", x["sig"], cy["sig"])
            - 1j * kappa * x["u"] * cy["u"]
            + np.einsum("cqa,cqa->cq", x["sig"], cy["gu"])
            + np.einsum("cqa,cqa->cq", x["gu"], cy["sig"]))
    edge = (x["lam"] - x["ue"]) * cy["sn"] + x["sn"] * (cy["lam"] - cy["ue"])
    return complex(np.sum(W * cell) + np.sum(ds * edge))


def evaluate_form_A(x, y, kappa, degree=None):
    """A(x; y) for discrete triples, linear in x and conjugate-linear in y."""
    degree = degree or 2 * x.k + 2
    return form_A_tabulated(tabulate_discrete(x, degree), tabulate_discrete(y, degree), kappa, x.mesh, degree)


def form_action(xt, kappa, mesh, k, degree):
    """Vector of A(x; basis_i) over every test basis function, global ordering
    (flux, scalar, multiplier) as in the monolithic system."""
    geo = geometry(mesh)
    tabs = _tables(k, degree)
    w = quadrature_triangle(degree).weights
    wt = tabs.edge_w
    sq = np.sqrt(geo.det)
    # flux tests: phi = B phi_hat / det, dx = det dx_hat
    Bphi = np.einsum("cab,iqb->ciqa", geo.B, tabs.phi)
    r_tau = (1j * kappa * np.einsum("q,cqa,ciqa->ci", w, xt["sig"], Bphi)
             + np.einsum("q,cqa,ciqa->ci", w, xt["gu"], Bphi)
             + np.einsum("q,clq,liq->ci", wt, xt["lam"] - xt["ue"], tabs.edge_phi_n))
    # scalar tests: psi = psi_hat / sqrt(det), grad psi = B^{-T} grad psi_hat / sqrt(det)
    gpsi = np.einsum("cba,iqb->ciqa", geo.Binv, tabs.grad_psi)
    r_v = (-1j * kappa * np.einsum("q,cq,iq->ci", w, xt["u"], tabs.psi) * sq[:, None]
           + np.einsum("q,cqa,ciqa->ci", w, xt["sig"], gpsi) * sq[:, None]
           - np.einsum("q,clq,cl,liq->ci", wt, xt["sn"], geo.lengths, tabs.edge_psi) / sq[:, None])
    # multiplier tests
    r_mu = np.zeros((mesh.n_interior_edges, k + 1), dtype=complex)
    for fl, chi in ((False, tabs.chi), (True, tabs.chi_rev)):
        mask = (geo.interior >= 0) & (geo.flipped == fl)
        c, l = np.nonzero(mask)
        vals = np.einsum("q,nq,mq->nm", wt, xt["sn"][c, l] * np.sqrt(geo.lengths[c, l])[:, None], chi)
        np.add.at(r_mu, geo.interior[c, l], vals)
    return np.concatenate([r_tau.ravel(), r_v.ravel(), r_mu.ravel()])


def broken_l2(mesh, degree, values):
    """sqrt(sum_K int_K |values|^2) for values tabulated at cell points,
    shape (C, Q) or (C, Q, 2)."""
    W, _ = _weights(mesh, degree)
    v = np.abs(values) ** 2
    if v.ndim == 3:
        v = v.sum(axis=-1)
    return float(np.sqrt(np.sum(W * v)))


def broken_l2_norm(field, sol_or_triple=None, exact=None, degree=None, mesh=None):
    """Broken L2 norm of a u-like or sigma-like field.

    ``sol_or_triple`` supplies the discrete field (may be None) and ``exact``
    an evaluator ``(x, y) -> values`` (may be None); the norm is taken of
    discrete - exact.
    """
    if field not in ("u", "sigma"):
        raise ValueError("field must be 'u' or 'sigma'")
    tri = None if sol_or_triple is None else (
        sol_or_triple if isinstance(sol_or_triple, Triple) else Triple.of(sol_or_triple))
    mesh = tri.mesh if tri is not None else mesh
    k = tri.k if tri is not None else 0
    degree = degree or 2 * k + 8
    key = "u" if field == "u" else "sig"
    vals = 0.0
    if tri is not None:
        vals = tabulate_discrete(tri, degree)[key]
    if exact is not None:
        P = cell_points(mesh, degree)
        vals = vals - np.asarray(exact(P[..., 0], P[..., 1]))
    if np.isscalar(vals):
        return 0.0
    return broken_l2(mesh, degree, vals)


def energy_norm_tabulated(t, kappa, h, mesh, degree):
    W, ds = _weights(mesh, degree)
    total = (kappa * np.sum(W * np.sum(np.abs(t["sig"]) ** 2, -1))
             + kappa * np.sum(W * np.abs(t["u"]) ** 2)
             + np.sum(W * np.sum(np.abs(t["gu"]) ** 2, -1)) / kappa
             + np.sum(ds * np.abs(t["lam"] - t["ue"]) ** 2) / (kappa * h))
    return float(np.sqrt(total))


def energy_norm(triple, kappa, h=None, degree=None):
    """Mesh-dependent energy norm of a discrete triple (tau, v, mu).

    Interior edges contribute |mu - v|_K|^2 from both sides; boundary edges
    use mu = 0.
    """
    h = triple.mesh.h if h is None else h
    degree = degree or 2 * triple.k + 2
    return energy_norm_tabulated(tabulate_discrete(triple, degree), kappa, h, triple.mesh, degree)


def energy_gram(mesh, k, kappa, h=None):
    """Dense Hermitian matrix N with energy_norm(x)^2 = x^H N x."""
    import scipy.sparse as sp

    h = mesh.h if h is None else h
    geo = geometry(mesh)
    tabs = _tables(k, 2 * k + 2)
    w = quadrature_triangle(2 * k + 2).weights
    n_rt, n_p = rt_dim(k), (k + 1) * (k + 2) // 2
    C = mesh.n_cells
    off_u, off_l = C * n_rt, C * (n_rt + n_p)
    total = n_unknowns(mesh, k)
    rows, cols, vals = [], [], []

    def add(r, c, m):
        rows.append(np.repeat(r, len(c)))
        cols.append(np.tile(c, len(r)))
        vals.append(m.ravel())

    for c in range(C):
        Bphi = np.einsum("ab,iqb->iqa", geo.B[c], tabs.phi)
        mrt = np.einsum("q,iqa,jqa->ij", w, Bphi, Bphi) / geo.det[c]
        gpsi = np.einsum("ba,iqb->iqa", geo.Binv[c], tabs.grad_psi)
        stiff = np.einsum("q,iqa,jqa->ij", w, gpsi, gpsi)
        uu = kappa * np.eye(n_p) + stiff / kappa
        iu = off_u + c * n_p + np.arange(n_p)
        for l in range(3):
            psi_e = tabs.edge_psi[l] / np.sqrt(geo.det[c])
            L = geo.lengths[c, l]
            uu = uu + np.einsum("q,iq,jq->ij", tabs.edge_w * L, psi_e, psi_e) / (kappa * h)
            j = geo.interior[c, l]
            if j < 0:
                continue
            chi = (tabs.chi_rev if geo.flipped[c, l] else tabs.chi) / np.sqrt(L)
            ul = -np.einsum("q,iq,mq->im", tabs.edge_w * L, psi_e, chi) / (kappa * h)
            ll = np.einsum("q,iq,mq->im", tabs.edge_w * L, chi, chi) / (kappa * h)
            il = off_l + j * (k + 1) + np.arange(k + 1)
            add(iu, il, ul)
            add(il, iu, ul.T)
            add(il, il, ll)
        add(c * n_rt + np.arange(n_rt), c * n_rt + np.arange(n_rt), kappa * mrt)
        add(iu, iu, uu)
    N = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(total, total)).toarray()
    return N


# --------------------------------------------------------------------------
# projections


def project_pk(u, mesh, k, degree=None, cells=None):
    """L2 projection onto P_k per cell; returns (C, n_p) coefficients in the
    orthonormal physical basis."""
    degree = degree or 2 * k + 8
    geo = geometry(mesh)
    tabs = _tables(k, degree)
    w = quadrature_triangle(degree).weights
    P = cell_points(mesh, degree)
    vals = np.asarray(u(P[..., 0], P[..., 1]), dtype=complex)
    return np.einsum("q,cq,iq->ci", w, vals, tabs.psi) * np.sqrt(geo.det)[:, None]


def project_edge(lam, mesh, k, degree=None):
    """L2 projection onto P_k on every interior edge, global edge orientation."""
    degree = degree or 2 * k + 8
    eq = quadrature_edge(degree)
    chi = pk_edge_values(k, eq.points)
    E = mesh.edges[mesh.interior_edges]
    a, b = mesh.vertices[E[:, 0]], mesh.vertices[E[:, 1]]
    pts = a[:, None, :] + eq.points[None, :, None] * (b - a)[:, None, :]
    vals = np.asarray(lam(pts[..., 0], pts[..., 1]), dtype=complex)
    L = mesh.edge_lengths[mesh.interior_edges]
    return np.einsum("q,eq,mq->em", eq.weights, vals, chi) * np.sqrt(L)[:, None]


def _rt_dof_matrix(k, degree):
    """Physical DOF functionals applied to the physical RT basis; identical on
    every cell because the functionals are Piola-compatible."""
    tabs = _tables(k, degree)
    w = quadrature_triangle(degree).weights
    rows = []
    for l in range(3):
        for m in range(k + 1):
            rows.append(np.einsum("q,iq,q->i", tabs.edge_w, tabs.edge_phi_n[l], tabs.chi[m]))
    if k >= 1:
        p = pk_cell_values(k - 1, quadrature_triangle(degree).points)
        for comp in range(2):
            for i in range(len(p)):
                rows.append(np.einsum("q,iq,q->i", w, tabs.phi[..., comp], p[i]))
    return np.array(rows)


def rt_functionals(sigma, mesh, k, degree):
    """RT degrees of freedom of the vector field ``sigma`` on every cell, (C, n_rt).

    Edge moments use the orthonormal P_k(e) basis in the cell's walking
    parameter; interior moments use B^{-T} p_hat for p_hat in [P_{k-1}]^2.
    """
    geo = geometry(mesh)
    tabs = _tables(k, degree)
    Pe = edge_points_physical(mesh, degree)
    flux = np.einsum("clqa,cla->clq", np.asarray(sigma(Pe[..., 0], Pe[..., 1]), dtype=complex), geo.normals)
    edge = np.einsum("q,clq,cl,mq->clm", tabs.edge_w, flux, geo.lengths, tabs.chi).reshape(len(flux), -1)
    if k == 0:
        return edge
    cq = quadrature_triangle(degree)
    p = pk_cell_values(k - 1, cq.points)
    P = cell_points(mesh, degree)
    vals = np.asarray(sigma(P[..., 0], P[..., 1]), dtype=complex)
    # sigma . B^{-T} p_hat  ->  (B^{-1} sigma) . p_hat
    pulled = np.einsum("cab,cqb->cqa", geo.Binv, vals)
    interior = np.einsum("q,c,cqa,iq->cai", cq.weights, geo.det, pulled, p).reshape(len(vals), -1)
    return np.hstack([edge, interior])


def project_rt(sigma, mesh, k, degree=None):
    """Raviart-Thomas interpolant: match all RT_k degrees of freedom."""
    degree = degree or 2 * k + 8
    dofs = rt_functionals(sigma, mesh, k, degree)
    V = _rt_dof_matrix(k, degree)
    return np.linalg.solve(V, dofs.T).T


def project_case(case, mesh, k, degree=None):
    """Projected triple (Pi_RT sigma, Pi_K u, Pi_e u)."""
    return Triple(mesh, k, project_rt(case.sigma, mesh, k, degree), project_pk(case.u, mesh, k, degree),
                  project_edge(case.u, mesh, k, degree))


def divergence_values(triple, degree):
    geo = geometry(triple.mesh)
    tabs = _tables(triple.k, degree)
    return np.einsum("iq,ci->cq", tabs.div_phi, triple.sigma) / geo.det[:, None]


# --------------------------------------------------------------------------
# reports


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def to_jsonable(obj):
    return _jsonable(obj)


@dataclass
class ProbeReport:
    probe: str
    parameters: dict
    residuals: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)
    passed: bool = True
    flags: dict = field(default_factory=dict)


@dataclass
class ProjectionReport:
    hs: list
    errors: dict
    rates: dict
    constant_estimates: dict


@dataclass
class LiftingProbeResult:
    tau_tilde: np.ndarray
    moment_residuals: np.ndarray
    c_I_estimate: float


@dataclass
class StabilityProbeResult:
    c_A_estimate: float
    C_A_estimate: float
    C_A_sampled: float
    schur_spectrum_summary: dict


# --------------------------------------------------------------------------
# probes


def errors_against_case(sol, case, degree=None):
    """L2 errors of u_h and sigma_h and the energy norm of the projected differences."""
    tri = Triple.of(sol)
    degree = degree or 2 * tri.k + 8
    mesh = tri.mesh
    d = tabulate_discrete(tri, degree)
    P = cell_points(mesh, degree)
    x, y = P[..., 0], P[..., 1]
    err_u = broken_l2(mesh, degree, d["u"] - case.u(x, y))
    err_s = broken_l2(mesh, degree, d["sig"] - case.sigma(x, y))
    proj = project_case(case, mesh, tri.k, degree)
    err_e = energy_norm(proj - tri, sol.kappa, mesh.h)
    return {"u": err_u, "sigma": err_s, "energy": err_e}


def check_consistency(case, mesh, k, degree=VERIFY_DEGREE):
    """Residuals of A(Pi x - x; y) over all test basis functions.

    Scalar and multiplier slots must vanish; the flux slot must equal
    (i kappa (Pi_RT sigma - sigma), tau_h).
    """
    kappa = case.kappa
    proj = project_case(case, mesh, k, degree)
    tp = tabulate_discrete(proj, degree)
    te = tabulate_case(mesh, case, degree)
    a_proj = form_action(tp, kappa, mesh, k, degree)
    a_exact = form_action(te, kappa, mesh, k, degree)
    resid = a_proj - a_exact
    n_tau = mesh.n_cells * rt_dim(k)
    n_v = mesh.n_cells * (k + 1) * (k + 2) // 2
    # (i kappa e_sigma, tau) alone: action of (e_sigma, 0, 0)
    only_sig = {key: np.zeros_like(v) for key, v in tp.items()}
    only_sig["sig"] = tp["sig"] - te["sig"]
    mass_term = form_action(only_sig, kappa, mesh, k, degree)[:n_tau]
    scale = max(np.max(np.abs(a_proj)), np.max(np.abs(a_exact)), 1e-300)
    r_tau = resid[:n_tau] - mass_term
    r_v = resid[n_tau:n_tau + n_v]
    r_mu = resid[n_tau + n_v:]
    return ProbeReport(
        "consistency", {"case": case.name, "n_cells": mesh.n_cells, "k": k, "kappa": kappa, "degree": degree},
        residuals={"v_slot": float(np.max(np.abs(r_v), initial=0.0)),
                   "mu_slot": float(np.max(np.abs(r_mu), initial=0.0)),
                   "tau_slot_minus_mass": float(np.max(np.abs(r_tau), initial=0.0)),
                   "tau_mass_term": float(np.max(np.abs(mass_term), initial=0.0))},
        estimates={"scale": float(scale)})


def check_conservation(sol, source=None, boundary=None, degree=None):
    """Per-element balance r_K = -(i kappa u_h, 1)_K - <sigma_h . n, 1>_dK + (f, 1)_K.

    The global residual replaces the sum of element fluxes by the flux
    through the domain boundary, so it also sees interior flux mismatch.
    """
    tri = Triple.of(sol)
    mesh, k, kappa = tri.mesh, tri.k, sol.kappa
    degree = degree or 2 * k + 8
    W, ds = _weights(mesh, degree)
    t = tabulate_discrete(tri, degree)
    mass = np.sum(W * t["u"], axis=1)
    flux = np.sum(ds * t["sn"], axis=(1, 2))
    if source is not None:
        P = cell_points(mesh, degree)
        fvals = 1j * np.asarray(source(P[..., 0], P[..., 1]), dtype=complex) / kappa
        load = np.sum(W * fvals, axis=1)
        fnorm = broken_l2(mesh, degree, fvals)
    else:
        load = np.zeros(mesh.n_cells, dtype=complex)
        fnorm = 0.0
    r = -1j * kappa * mass - flux + load
    geo = geometry(mesh)
    bmask = geo.interior < 0
    bflux = np.sum((ds * t["sn"])[bmask])
    r_global = -1j * kappa * mass.sum() - bflux + load.sum()
    gnorm = 0.0
    if boundary is not None:
        Pe = edge_points_physical(mesh, degree)
        g = np.asarray(boundary(Pe[..., 0], Pe[..., 1]), dtype=complex)
        gnorm = float(np.sqrt(np.sum((ds * np.abs(g) ** 2)[bmask])))
    scale = fnorm + gnorm
    return ProbeReport(
        "conservation", {"n_cells": mesh.n_cells, "k": k, "kappa": kappa},
        residuals={"max_local": float(np.max(np.abs(r))), "sum_local": float(abs(r.sum())),
                   "global": float(abs(r_global))},
        estimates={"data_scale": scale, "per_element": r})


def jump_residuals(sol, degree=None):
    """Moments of the normal-flux jump against the multiplier basis, per interior edge."""
    tri = Triple.of(sol)
    mesh, k = tri.mesh, tri.k
    degree = degree or 2 * k + 2
    t = tabulate_discrete(tri, degree)
    only_flux = {key: np.zeros_like(v) for key, v in t.items()}
    only_flux["sn"] = t["sn"]
    act = form_action(only_flux, sol.kappa, mesh, k, degree)
    n_loc = mesh.n_cells * (rt_dim(k) + (k + 1) * (k + 2) // 2)
    jumps = act[n_loc:]
    # one-sided moments give the scale
    _, ds = _weights(mesh, degree)
    scale = float(np.max(np.sqrt(np.sum(ds * np.abs(t["sn"]) ** 2, axis=-1)), initial=0.0))
    return jumps.reshape(-1, k + 1), scale


def _lifting_system(mesh, cell, k, degree):
    """Square system of the lifting on one cell.

    Returns (A, R, M_rt, K_grad): A applies the RT functionals to the physical
    basis, R maps sample parameters [v (n_p), mu (3 (k+1))] to right-hand
    sides, M_rt is the RT mass matrix and K_grad the P_k stiffness matrix.
    """
    geo = geometry(mesh)
    tabs = _tables(k, degree)
    cq = quadrature_triangle(degree)
    B, det, Binv = geo.B[cell], geo.det[cell], geo.Binv[cell]
    L = geo.lengths[cell]
    n_rt, n_p = rt_dim(k), (k + 1) * (k + 2) // 2
    Bphi = np.einsum("ab,iqb->iqa", B, tabs.phi)
    A = np.zeros((n_rt, n_rt))
    R = np.zeros((n_rt, n_p + 3 * (k + 1)))
    row = 0
    for l in range(3):
        q = tabs.chi / np.sqrt(L[l])
        for m in range(k + 1):
            A[row] = np.einsum("q,iq,q->i", tabs.edge_w, tabs.edge_phi_n[l], q[m])
            # <mu, q_m> with mu = sum_j mu_j q_j
            R[row, n_p + l * (k + 1):n_p + (l + 1) * (k + 1)] = q @ (tabs.edge_w * L[l] * q[m])
            row += 1
    gpsi = np.einsum("ba,iqb->iqa", Binv, tabs.grad_psi) / np.sqrt(det)
    if k >= 1:
        p_hat = pk_cell_values(k - 1, cq.points)
        for comp in range(2):
            for i in range(len(p_hat)):
                # p = p_hat o F^{-1} in one component; the Piola 1/det cancels dx
                A[row] = np.einsum("q,iq,q->i", cq.weights, Bphi[..., comp], p_hat[i])
                R[row, :n_p] = det * np.einsum("q,jq,q->j", cq.weights, gpsi[..., comp], p_hat[i])
                row += 1
    M_rt = np.einsum("q,iqa,jqa->ij", cq.weights, Bphi, Bphi) / det
    K_grad = det * np.einsum("q,iqa,jqa->ij", cq.weights, gpsi, gpsi)
    return A, R, M_rt, K_grad


def lifting_probe(v, mu, mesh, cell, k, h=None, degree=None):
    """Local lifting tau in RT_k(K) with (tau, p)_K = (grad v, p)_K for p in
    [P_{k-1}]^2 and <tau . n, q>_e = <mu, q>_e for q in P_k(e), e in dK.

    ``v``: P_k coefficients on the cell; ``mu``: (3, k + 1) coefficients per
    local edge in the cell's walking parameter (orthonormal, physical).
    """
    h = mesh.h if h is None else h
    degree = degree or 2 * k + 2
    A, R, M_rt, K_grad = _lifting_system(mesh, cell, k, degree)
    if np.linalg.cond(A) > 1e12:
        raise ArithmeticError(f"lifting system singular on cell {cell}")
    x = np.concatenate([np.asarray(v, dtype=complex), np.asarray(mu, dtype=complex).ravel()])
    rhs = R @ x
    tau = np.linalg.solve(A, rhs)
    res = A @ tau - rhs
    n_p = len(v)
    num = np.real(tau.conj() @ M_rt @ tau)
    den = np.real(x[:n_p].conj() @ K_grad @ x[:n_p]) + h * np.sum(np.abs(x[n_p:]) ** 2)
    ratio = float(np.sqrt(num / den)) if den > 0 else 0.0
    return LiftingProbeResult(tau, res, ratio)


def lifting_constant(mesh, k, h=None, kappa=1.0, n_random=4, seed=42, degree=None):
    """Largest lifting ratio over sampled (v, mu) on every cell.

    The samples are the extremal direction of each cell (a generalized
    eigenproblem; constants in v do not move tau) and ``n_random`` random
    pairs v = u / kappa, mu = (lambda - u) / (kappa h) built from random
    u, lambda. Returns (estimate, largest moment residual).
    """
    h = mesh.h if h is None else h
    degree = degree or 2 * k + 2
    rng = np.random.default_rng(seed)
    n_p = (k + 1) * (k + 2) // 2
    n_mu = 3 * (k + 1)
    best = 0.0
    max_res = 0.0
    for c in range(mesh.n_cells):
        A, R, M_rt, K_grad = _lifting_system(mesh, c, k, degree)
        if np.linalg.cond(A) > 1e12:
            raise ArithmeticError(f"lifting system singular on cell {c}")
        T = np.linalg.solve(A, R)
        max_res = max(max_res, float(np.max(np.abs(A @ T - R))))
        keep = np.r_[1:n_p, n_p:n_p + n_mu]
        Tk = T[:, keep]
        Dm = sla.block_diag(K_grad[1:, 1:], h * np.eye(n_mu))
        ev = sla.eigh(Tk.T @ M_rt @ Tk, Dm, eigvals_only=True)
        best = max(best, float(np.sqrt(max(ev[-1], 0.0))))
        for _ in range(n_random):
            u = rng.standard_normal(n_p) + 1j * rng.standard_normal(n_p)
            lam = rng.standard_normal(n_mu) + 1j * rng.standard_normal(n_mu)
            # trace of u on each edge, in the orthonormal edge basis
            x = np.concatenate([u / kappa, (lam - _trace_coefficients(mesh, c, k, u)) / (kappa * h)])
            tau = T @ x
            num = np.real(tau.conj() @ M_rt @ tau)
            den = np.real(x[:n_p].conj() @ K_grad @ x[:n_p]) + h * np.sum(np.abs(x[n_p:]) ** 2)
            if den > 0:
                best = max(best, float(np.sqrt(num / den)))
    return best, max_res


def _trace_coefficients(mesh, cell, k, u):
    """Edge-basis coefficients of the traces of a P_k function (exact: traces lie in P_k(e))."""
    geo = geometry(mesh)
    tabs = _tables(k, 2 * k + 2)
    L = geo.lengths[cell]
    out = []
    for l in range(3):
        vals = tabs.edge_psi[l].T @ u / np.sqrt(geo.det[cell])
        q = tabs.chi / np.sqrt(L[l])
        out.append(q @ (tabs.edge_w * L[l] * vals))
    return np.concatenate(out)


def schur_spectrum(mesh, k, kappa):
    """Dense spectral summary of the condensed multiplier matrix S."""
    from .solver import condensed_system

    S = condensed_system(mesh, k, kappa).matrix.toarray()
    sv = np.linalg.svd(S, compute_uv=False)
    herm = 0.5 * (S + S.conj().T)
    skew = 0.5 * (S - S.conj().T) / 1j
    eh = np.linalg.eigvalsh(herm)
    es = np.linalg.eigvalsh(skew)
    # i S is real symmetric when kappa is real; its inertia decides whether CG on i S can work
    iS = 1j * S
    sym = float(np.linalg.norm(S - S.T) / np.linalg.norm(S))
    real_part = float(np.linalg.norm(iS.imag) / np.linalg.norm(iS))
    ei = np.linalg.eigvalsh(0.5 * (iS.real + iS.real.T))
    return {
        "size": int(S.shape[0]), "sigma_min": float(sv[-1]), "sigma_max": float(sv[0]),
        "symmetry_residual": sym, "hermitian_residual": float(np.linalg.norm(S - S.conj().T) / np.linalg.norm(S)),
        "re_field_of_values": [float(eh[0]), float(eh[-1])], "im_field_of_values": [float(es[0]), float(es[-1])],
        "iS_imag_fraction": real_part,
        "iS_inertia": {"positive": int(np.sum(ei > 0)), "negative": int(np.sum(ei < 0))},
        "positive_definite": bool(eh[0] > 0),
    }


def stability_probe(mesh, k, kappa, n_samples=200, seed=42):
    """Discrete inf-sup and boundedness constants of the form in the energy norm."""
    from .solver import monolithic_system

    n = n_unknowns(mesh, k)
    if n > STABILITY_CAP:
        raise ValueError(f"stability probe limited to {STABILITY_CAP} unknowns, got {n}")
    ref = build_reference(k)
    K, _ = monolithic_system(mesh, ref, kappa)
    K = K.toarray()
    N = energy_gram(mesh, k, kappa)
    Lc = np.linalg.cholesky(N)
    Kt = sla.solve_triangular(Lc, sla.solve_triangular(Lc, K, lower=True).conj().T, lower=True).conj().T
    sv = np.linalg.svd(Kt, compute_uv=False)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_samples):
        x = Triple.random(mesh, k, rng)
        y = Triple.random(mesh, k, rng)
        ratio = abs(y.vector().conj() @ K @ x.vector()) / (energy_norm(x, kappa) * energy_norm(y, kappa))
        best = max(best, ratio)
    return StabilityProbeResult(float(sv[-1]), float(sv[0]), float(best), schur_spectrum(mesh, k, kappa))


def check_projected_error_bound(case, mesh, k, sol=None, degree=None):
    """|||(Pi_RT sigma - sigma_h, Pi_K u - u_h, Pi_e u - lambda_h)||| / (sqrt(kappa) ||Pi_RT sigma - sigma||)."""
    from .solver import solve

    kappa = case.kappa
    degree = degree or 2 * k + 8
    if sol is None:
        sol = solve(mesh, k, kappa, case.source, case.boundary)
    proj = project_case(case, mesh, k, degree)
    num = energy_norm(proj - Triple.of(sol), kappa, mesh.h)
    tp = tabulate_discrete(proj, degree)
    P = cell_points(mesh, degree)
    den = math.sqrt(kappa) * broken_l2(mesh, degree, tp["sig"] - case.sigma(P[..., 0], P[..., 1]))
    exact = num <= 1e-11 and den <= 1e-11
    return {"numerator": num, "denominator": den, "ratio": None if exact else num / den, "exact_case": exact}


def projection_study(case, k, levels, degree=None):
    """Projection errors and observed orders on structured meshes."""
    from .mms import compute_rate

    degree = degree or 2 * k + 8
    keys = ["u", "grad_u", "trace_K", "trace_e", "sigma", "div_sigma"]
    errors = {key: [] for key in keys}
    hs = []
    for n in levels:
        mesh = generate_structured(n)
        hs.append(mesh.h)
        proj = project_case(case, mesh, k, degree)
        tp = tabulate_discrete(proj, degree)
        te = tabulate_case(mesh, case, degree)
        P = cell_points(mesh, degree)
        _, ds = _weights(mesh, degree)
        errors["u"].append(broken_l2(mesh, degree, tp["u"] - te["u"]))
        errors["grad_u"].append(broken_l2(mesh, degree, tp["gu"] - te["gu"]))
        errors["trace_K"].append(float(np.sqrt(np.sum(ds * np.abs(tp["ue"] - te["ue"]) ** 2))))
        interior = (geometry(mesh).interior >= 0)[..., None]
        errors["trace_e"].append(float(np.sqrt(np.sum(np.where(interior, ds * np.abs(tp["lam"] - te["ue"]) ** 2, 0)))))
        errors["sigma"].append(broken_l2(mesh, degree, tp["sig"] - te["sig"]))
        div_h = divergence_values(proj, degree)
        errors["div_sigma"].append(broken_l2(mesh, degree, div_h - case.div_sigma(P[..., 0], P[..., 1])))
    rates = {key: compute_rate(v, hs) for key, v in errors.items()}
    expected = {"u": k + 1, "grad_u": k, "trace_K": k + 0.5, "trace_e": k + 0.5, "sigma": k + 1, "div_sigma": k + 1}
    consts = {key: [e / h ** expected[key] for e, h in zip(v, hs)] for key, v in errors.items()}
    return ProjectionReport(hs, errors, rates, consts)
