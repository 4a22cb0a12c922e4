"""Global multiplier system, field recovery and the monolithic oracle."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .local import assemble_local_blocks, back_substitute, block_matrix, cell_geometry, condense
from .refelem import build_reference

log = logging.getLogger(__name__)

MONOLITHIC_CAP = 200_000
RCOND_MIN = 1e-12


class GlobalResonanceError(ArithmeticError):
    def __init__(self, kappa, detail):
        super().__init__(f"singular multiplier system at kappa={kappa:g}: {detail}")
        self.kappa = kappa


class ConvergenceError(RuntimeError):
    def __init__(self, method, iterations, residual):
        super().__init__(f"{method} did not converge after {iterations} iterations "
                         f"(relative residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class StageError(RuntimeError):
    """Wraps a failure with the pipeline stage it came from."""

    def __init__(self, stage, err):
        super().__init__(f"[{stage}] {err}")
        self.stage = stage
        self.cause = err


@dataclass(frozen=True)
class CondensedSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    dof_map: np.ndarray  # (n_interior_edges, k + 1)
    kappa: float

    @property
    def size(self):
        return len(self.rhs)


@dataclass(frozen=True)
class FieldSolution:
    sigma: np.ndarray  # (C, n_rt)
    u: np.ndarray  # (C, n_p)
    lam: np.ndarray  # (n_interior_edges, k + 1)
    mesh: object
    ref: object
    kappa: float
    stats: dict = field(default_factory=dict, compare=False)

    @property
    def k(self):
        return self.ref.k

    def as_vector(self):
        return np.concatenate([self.sigma.ravel(), self.u.ravel(), self.lam.ravel()])


def dof_map(mesh, k):
    return np.arange(mesh.n_interior_edges * (k + 1)).reshape(-1, k + 1)


def local_stage(mesh, ref, kappa, source=None, boundary=None, data_degree=None, d_sign_cells=()):
    """Assemble and condense every element, in cell order."""
    blocks, caches = [], []
    for c in range(mesh.n_cells):
        geom = cell_geometry(mesh, c, ref.k)
        b = assemble_local_blocks(geom, ref, kappa, source, boundary, data_degree,
                                  d_sign=-1.0 if c in d_sign_cells else 1.0)
        blocks.append(b)
        caches.append(condense(b))
    return blocks, caches


def assemble_global(mesh, caches, blocks, k):
    """Scatter element Schur complements into the sparse multiplier system."""
    if len(caches) != mesh.n_cells or len(blocks) != mesh.n_cells:
        raise ValueError("need exactly one condensation cache per cell")
    n = mesh.n_interior_edges * (k + 1)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n, dtype=complex)
    for cache, b in zip(caches, blocks):
        s = b.multiplier_slots
        if len(s) == 0:
            continue
        if s.max() >= n:
            raise ValueError(f"cell {b.cell} references multiplier dof {s.max()} outside the mesh")
        rows.append(np.repeat(s, len(s)))
        cols.append(np.tile(s, len(s)))
        vals.append(cache.S.ravel())
        np.add.at(rhs, s, cache.G_local)
    if rows:
        # coo -> csr sums duplicates in input order, so the result is deterministic
        S = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsr()
    else:
        S = sp.csr_matrix((n, n), dtype=complex)
    S.sum_duplicates()
    S.sort_indices()
    return CondensedSystem(S, rhs, dof_map(mesh, k), blocks[0].kappa if blocks else float("nan"))


def _rcond_estimate(lu, S):
    n = S.shape[0]
    inv = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda x: lu.solve(x, trans="H"),
                              dtype=complex)
    if n <= 4:
        inv_norm = np.abs(lu.solve(np.eye(n, dtype=complex))).sum(axis=0).max()
    else:
        inv_norm = spla.onenormest(inv)
    return 1.0 / (spla.norm(S, 1) * inv_norm)


def solve_multiplier(system, method="direct", tol=1e-12, maxiter=None, stats=None):
    """Solve S lambda = G.

    ``method`` is "direct" (sparse LU), "iterative" (Jacobi-preconditioned
    GMRES) or "cg-experimental" (plain CG, whose applicability to this
    non-Hermitian system is unproven; failures are raised, not hidden).
    """
    S, G = system.matrix, system.rhs
    stats = {} if stats is None else stats
    stats["method"] = method
    n = len(G)
    if n == 0 or not np.any(G):
        stats["residual"] = 0.0
        return np.zeros(n, dtype=complex)
    gnorm = np.linalg.norm(G)
    if method == "direct":
        try:
            lu = spla.splu(S.tocsc().astype(complex))
        except RuntimeError as err:
            raise GlobalResonanceError(system.kappa, str(err)) from err
        rcond = _rcond_estimate(lu, S)
        stats["rcond_estimate"] = float(rcond)
        if not rcond >= RCOND_MIN:
            raise GlobalResonanceError(system.kappa, f"reciprocal condition estimate {rcond:.2e}")
        lam = lu.solve(G)
        if not np.all(np.isfinite(lam)):
            raise GlobalResonanceError(system.kappa, "non-finite solution")
    elif method in ("iterative", "cg-experimental"):
        maxiter = maxiter or 10 * n
        count = [0]

        def cb(_):
            count[0] += 1

        if method == "iterative":
            d = S.diagonal()
            d = np.where(np.abs(d) > 0, d, 1.0)
            P = spla.LinearOperator(S.shape, matvec=lambda x: x / d, dtype=complex)
            restart = min(n, 200)
            lam, info = spla.gmres(S, G, rtol=tol, atol=0.0, restart=restart, maxiter=maxiter,
                                   M=P, callback=cb, callback_type="pr_norm")
        else:
            lam, info = spla.cg(S, G, rtol=tol, atol=0.0, maxiter=maxiter, callback=cb)
        stats["iterations"] = count[0]
        res = np.linalg.norm(S @ lam - G) / gnorm
        if info != 0 or not np.isfinite(res):
            raise ConvergenceError(method, count[0], res)
    else:
        raise ValueError(f"unknown solver method {method!r}")
    stats["residual"] = float(np.linalg.norm(S @ lam - G) / gnorm)
    return lam


def recover_fields(lam, caches, blocks, mesh, ref, kappa, stats=None):
    """Back-substitute element by element."""
    sigma = np.zeros((mesh.n_cells, ref.n_rt), dtype=complex)
    u = np.zeros((mesh.n_cells, ref.n_pk), dtype=complex)
    for c, (cache, b) in enumerate(zip(caches, blocks)):
        sigma[c], u[c] = back_substitute(lam[b.multiplier_slots], cache, b)
    return FieldSolution(sigma, u, np.asarray(lam).reshape(-1, ref.k + 1), mesh, ref, kappa,
                         dict(stats or {}))


def _check_kappa(kappa):
    if not (np.isfinite(kappa) and kappa > 0):
        raise ValueError(f"kappa must be positive, got {kappa!r}")


def solve(mesh, k, kappa, source=None, boundary=None, *, method="direct", tol=1e-12, maxiter=None,
          quad_degree=None, data_degree=None, dump_matrix=None, d_sign_cells=()):
    """Assemble, condense, solve for the multiplier and recover all fields.

    ``d_sign_cells`` flips the sign of D on the listed cells; it exists only
    so verification can prove it detects a broken coupling.
    """
    _check_kappa(kappa)
    ref = build_reference(k, quad_degree)
    stats = {}
    t0 = time.perf_counter()
    try:
        blocks, caches = local_stage(mesh, ref, kappa, source, boundary, data_degree, d_sign_cells)
    except Exception as err:
        raise StageError("local", err) from err
    t1 = time.perf_counter()
    try:
        system = assemble_global(mesh, caches, blocks, k)
    except Exception as err:
        raise StageError("assemble", err) from err
    if dump_matrix is not None:
        write_matrix_market(dump_matrix, system)
    t2 = time.perf_counter()
    try:
        lam = solve_multiplier(system, method, tol, maxiter, stats)
    except Exception as err:
        raise StageError("solve", err) from err
    t3 = time.perf_counter()
    sol = recover_fields(lam, caches, blocks, mesh, ref, kappa, stats)
    stats.update(n_multiplier=system.size, t_local=t1 - t0, t_assemble=t2 - t1, t_solve=t3 - t2,
                 t_recover=time.perf_counter() - t3)
    log.debug("solve n_cells=%d k=%d kappa=%g: %s", mesh.n_cells, k, kappa, stats)
    return sol


def condensed_system(mesh, k, kappa, source=None, boundary=None, *, quad_degree=None, data_degree=None):
    ref = build_reference(k, quad_degree)
    blocks, caches = local_stage(mesh, ref, kappa, source, boundary, data_degree)
    return assemble_global(mesh, caches, blocks, k)


def monolithic_system(mesh, ref, kappa, source=None, boundary=None, data_degree=None):
    """Uncondensed sparse matrix and right-hand side; unknowns ordered
    (all flux, all scalar, all multiplier), each cell-major."""
    n_rt, n_p = ref.n_rt, ref.n_pk
    C = mesh.n_cells
    off_u = C * n_rt
    off_l = off_u + C * n_p
    total = off_l + mesh.n_interior_edges * (ref.k + 1)
    if total > MONOLITHIC_CAP:
        raise ValueError(f"monolithic oracle limited to {MONOLITHIC_CAP} unknowns, got {total}")
    rows, cols, vals = [], [], []
    rhs = np.zeros(total, dtype=complex)
    for c in range(C):
        geom = cell_geometry(mesh, c, ref.k)
        b = assemble_local_blocks(geom, ref, kappa, source, boundary, data_degree)
        K, r = block_matrix(b)
        idx = np.concatenate([c * n_rt + np.arange(n_rt), off_u + c * n_p + np.arange(n_p),
                              off_l + b.multiplier_slots])
        rows.append(np.repeat(idx, len(idx)))
        cols.append(np.tile(idx, len(idx)))
        vals.append(K.ravel())
        # third-row right-hand side is zero; flux/scalar rows are cell-local
        np.add.at(rhs, idx, r)
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(total, total)).tocsc()
    return K, rhs


def solve_monolithic(mesh, k, kappa, source=None, boundary=None, *, quad_degree=None, data_degree=None):
    """Solve the full coupled system without condensation (verification oracle)."""
    _check_kappa(kappa)
    ref = build_reference(k, quad_degree)
    K, rhs = monolithic_system(mesh, ref, kappa, source, boundary, data_degree)
    try:
        x = spla.splu(K).solve(rhs)
    except RuntimeError as err:
        raise GlobalResonanceError(kappa, str(err)) from err
    C = mesh.n_cells
    n_rt, n_p = ref.n_rt, ref.n_pk
    sigma = x[:C * n_rt].reshape(C, n_rt)
    u = x[C * n_rt:C * (n_rt + n_p)].reshape(C, n_p)
    lam = x[C * (n_rt + n_p):].reshape(-1, k + 1)
    res = np.linalg.norm(K @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
    return FieldSolution(sigma, u, lam, mesh, ref, kappa, {"method": "monolithic", "residual": res})


def write_matrix_market(path, system):
    """Dump S and G in Matrix Market coordinate format (complex general)."""
    scipy.io.mmwrite(str(path), system.matrix.tocoo(), comment="condensed multiplier matrix",
                     field="complex", symmetry="general")
    rhs_path = str(path)
    rhs_path = rhs_path[:-4] + "_rhs.mtx" if rhs_path.endswith(".mtx") else rhs_path + "_rhs.mtx"
    scipy.io.mmwrite(rhs_path, system.rhs.reshape(-1, 1), field="complex")
    return rhs_path
