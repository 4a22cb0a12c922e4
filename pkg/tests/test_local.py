import numpy as np
import pytest
from scipy import integrate

from hrtmdg.local import (LocalResonanceError, assemble_local_blocks, back_substitute, block_matrix,
                          cell_geometry, condense)
from hrtmdg.mesh import from_cells, generate_structured
from hrtmdg.refelem import build_reference, piola_map, rt_values


def jittered_mesh(rng, n=3, amount=0.15):
    m = generate_structured(n)
    v = m.vertices.copy()
    inner = (v[:, 0] > 0) & (v[:, 0] < 1) & (v[:, 1] > 0) & (v[:, 1] < 1)
    v[inner] += rng.uniform(-amount, amount, (inner.sum(), 2)) / n
    return from_cells(v, m.cells)


def random_blocks(rng, k, with_data=True):
    mesh = jittered_mesh(rng)
    c = int(rng.integers(mesh.n_cells))
    kappa = float(rng.uniform(0.5, 12.0))
    a, b = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    src = (lambda x, y: a * np.cos(x + 2 * y)) if with_data else None
    bnd = (lambda x, y: b * np.exp(x - y)) if with_data else None
    geom = cell_geometry(mesh, c, k)
    return assemble_local_blocks(geom, build_reference(k), kappa, src, bnd), geom


def elimination_oracle(blocks):
    K, rhs = block_matrix(blocks)
    n = blocks.A.shape[0] + blocks.E.shape[0]
    X = K[:n, :n]
    S = K[n:, :n] @ np.linalg.solve(X, K[:n, n:])
    G = K[n:, :n] @ np.linalg.solve(X, rhs[:n])
    return S, G


@pytest.mark.parametrize("k", [0, 1, 2])
def test_condensation_matches_dense_elimination(k):
    rng = np.random.default_rng(100 + k)
    n_checked = 0
    for _ in range(50):
        blocks, _ = random_blocks(rng, k)
        if blocks.D.shape[1] == 0:
            continue
        cache = condense(blocks)
        S, G = elimination_oracle(blocks)
        assert np.linalg.norm(cache.S - S) <= 1e-11 * np.linalg.norm(S)
        assert np.linalg.norm(cache.G_local - G) <= 1e-11 * max(np.linalg.norm(G), 1e-300)
        n_checked += 1
    assert n_checked >= 40


@pytest.mark.parametrize("k", [0, 1])
def test_structure(k):
    rng = np.random.default_rng(7)
    for _ in range(10):
        blocks, _ = random_blocks(rng, k, with_data=False)
        kappa = blocks.kappa
        assert np.allclose(blocks.E, -1j * kappa * np.eye(blocks.E.shape[0]), atol=1e-12 * kappa)
        assert np.all(blocks.B.imag == 0) and np.all(blocks.D.imag == 0)
        cache = condense(blocks)
        # M = i (kappa M_RT - B B^T / kappa) is purely imaginary and symmetric
        assert np.abs(cache.M.real).max() <= 1e-12 * np.abs(cache.M).max()
        assert np.allclose(cache.M, cache.M.T, atol=1e-12 * np.abs(cache.M).max())
        assert np.allclose(cache.E_inv, 1j / kappa * np.eye(blocks.E.shape[0]))


def test_zero_data():
    rng = np.random.default_rng(3)
    blocks, geom = random_blocks(rng, 1, with_data=False)
    assert not blocks.F1.any() and not blocks.F2.any()
    cache = condense(blocks)
    assert not cache.G_local.any()
    sigma, u = back_substitute(np.zeros(blocks.D.shape[1]), cache, blocks)
    assert not sigma.any() and not u.any()


def test_interior_cell_has_no_boundary_load():
    m = generate_structured(3)
    interior = [c for c in range(m.n_cells) if not m.boundary[m.cell_edges[c]].any()]
    geom = cell_geometry(m, interior[0], 1)
    b = assemble_local_blocks(geom, build_reference(1), 4.0, None, lambda x, y: 1.0 + x)
    assert not b.F1.any()


@pytest.mark.parametrize("k", [0, 1, 2])
def test_back_substitution_residual(k):
    rng = np.random.default_rng(11)
    for _ in range(10):
        blocks, _ = random_blocks(rng, k)
        cache = condense(blocks)
        lam = rng.standard_normal(blocks.D.shape[1]) + 1j * rng.standard_normal(blocks.D.shape[1])
        sigma, u = back_substitute(lam, cache, blocks)
        r1 = blocks.A @ sigma + blocks.B @ u + blocks.D @ lam - blocks.F1
        r2 = blocks.B.conj().T @ sigma + blocks.E @ u - blocks.F2
        scale = np.abs(blocks.F1).max() + np.abs(blocks.F2).max() + np.abs(lam).max()
        assert np.abs(r1).max() <= 1e-11 * scale and np.abs(r2).max() <= 1e-11 * scale
        # the third row equals G - S lambda, not zero, for arbitrary lambda
        assert np.allclose(blocks.D.conj().T @ sigma, cache.G_local - cache.S @ lam)


def test_back_substitute_shape_check():
    rng = np.random.default_rng(1)
    blocks, _ = random_blocks(rng, 0)
    with pytest.raises(ValueError):
        back_substitute(np.zeros(blocks.D.shape[1] + 1), condense(blocks), blocks)


@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
def test_flux_mass_against_adaptive_quadrature():
    rng = np.random.default_rng(5)
    blocks, geom = random_blocks(rng, 1, with_data=False)
    kappa, B, det = blocks.kappa, geom.B, geom.det

    def integrand(i, j):
        def f(y, x):
            v = piola_map(B, rt_values(1, np.array([[x, y]]))[:, 0], det)
            return v[i] @ v[j]
        return f

    A = np.zeros((8, 8), dtype=complex)
    for i in range(8):
        for j in range(i, 8):
            val = integrate.dblquad(integrand(i, j), 0, 1, 0, lambda x: 1 - x, epsabs=1e-14, epsrel=1e-13)[0]
            A[i, j] = A[j, i] = 1j * kappa * det * val
    assert np.abs(blocks.A - A).max() <= 1e-12 * np.abs(A).max()


def test_data_linearity():
    rng = np.random.default_rng(9)
    mesh = jittered_mesh(rng)
    geom = cell_geometry(mesh, 0, 1)
    ref = build_reference(1)
    f1, f2 = (lambda x, y: np.sin(x) * y), (lambda x, y: x**3 + 0 * y)
    g1, g2 = (lambda x, y: np.cos(y) + 0 * x), (lambda x, y: x * y)
    a, b = 2.0 - 1.0j, 0.5j
    mix = assemble_local_blocks(geom, ref, 3.0, lambda x, y: a * f1(x, y) + b * f2(x, y),
                                lambda x, y: a * g1(x, y) + b * g2(x, y))
    p = assemble_local_blocks(geom, ref, 3.0, f1, g1)
    q = assemble_local_blocks(geom, ref, 3.0, f2, g2)
    assert np.allclose(mix.F1, a * p.F1 + b * q.F1) and np.allclose(mix.F2, a * p.F2 + b * q.F2)


def test_d_sign_hook():
    rng = np.random.default_rng(2)
    mesh = jittered_mesh(rng)
    geom = cell_geometry(mesh, 4, 1)
    ref = build_reference(1)
    assert np.array_equal(assemble_local_blocks(geom, ref, 2.0, d_sign=-1.0).D,
                          -assemble_local_blocks(geom, ref, 2.0).D)


def test_local_resonance_raised():
    rng = np.random.default_rng(4)
    blocks, _ = random_blocks(rng, 1, with_data=False)
    # make M singular: A = B E^{-1} B^H
    bad = blocks.__class__(blocks.cell, blocks.kappa, blocks.B @ np.linalg.inv(blocks.E) @ blocks.B.conj().T,
                           blocks.B, blocks.D, blocks.E, blocks.F1, blocks.F2, blocks.multiplier_slots)
    with pytest.raises(LocalResonanceError):
        condense(bad)
