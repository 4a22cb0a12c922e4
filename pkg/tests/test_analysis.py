import math

import numpy as np
import pytest
from scipy import integrate

from hrtmdg import analysis as an
from hrtmdg.cli import energy_identity
from hrtmdg.mesh import from_cells, generate_structured
from hrtmdg.mms import plane_wave, polynomial_case, sine_product
from hrtmdg.refelem import build_reference, pk_cell_values
from hrtmdg.solver import monolithic_system, solve


def jittered(n, seed=0, amount=0.15):
    rng = np.random.default_rng(seed)
    m = generate_structured(n)
    v = m.vertices.copy()
    inner = (v[:, 0] > 0) & (v[:, 0] < 1) & (v[:, 1] > 0) & (v[:, 1] < 1)
    v[inner] += rng.uniform(-amount, amount, (inner.sum(), 2)) / n
    return from_cells(v, m.cells)


REF = from_cells([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])


# ---- projections


POLYS = {
    0: lambda x, y: 3.0 + 0 * x,
    1: lambda x, y: 1 + 2 * x - y,
    2: lambda x, y: 1 + 2 * x - y + x * y + 0.5 * x**2,
}


@pytest.mark.parametrize("k", [0, 1, 2])
def test_pk_projection_reproduces_polynomials(k):
    mesh = jittered(2)
    zero = an.Triple.zeros(mesh, k)
    tri = an.Triple(mesh, k, zero.sigma, an.project_pk(POLYS[k], mesh, k), zero.lam)
    assert an.broken_l2_norm("u", tri, POLYS[k]) <= 1e-12


def test_pk_projection_of_x_squared_on_reference():
    coeff = an.project_pk(lambda x, y: x**2, REF, 0)
    # <x^2, sqrt(2)> over the reference triangle
    assert math.isclose(coeff[0, 0].real, math.sqrt(2) / 12, rel_tol=1e-13)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_pk_projection_orthogonality(k):
    mesh = jittered(2, seed=3)
    u = lambda x, y: np.exp(x) * np.sin(2 * y) + 1j * np.cos(x * y)
    deg = 2 * k + 8
    coef = an.project_pk(u, mesh, k, deg)
    tri = an.Triple(mesh, k, np.zeros((mesh.n_cells, build_reference(k).n_rt)), coef,
                    np.zeros((mesh.n_interior_edges, k + 1)))
    t = an.tabulate_discrete(tri, deg)
    P = an.cell_points(mesh, deg)
    err = t["u"] - u(P[..., 0], P[..., 1])
    W, _ = an._weights(mesh, deg)
    psi = pk_cell_values(k, an.quadrature_triangle(deg).points) / np.sqrt(an.geometry(mesh).det)[:, None, None]
    resid = np.einsum("cq,cq,ciq->ci", W, err, psi)
    assert np.abs(resid).max() <= 1e-12


@pytest.mark.parametrize("k", [0, 1])
def test_edge_projection(k):
    mesh = jittered(2, seed=1)
    poly = lambda x, y: 1 - x + 2 * y
    coef = an.project_edge(poly, mesh, k)
    # evaluate back along each edge and compare
    eq = an.quadrature_edge(10)
    chi = an.pk_edge_values(k, eq.points)
    E = mesh.edges[mesh.interior_edges]
    a, b = mesh.vertices[E[:, 0]], mesh.vertices[E[:, 1]]
    pts = a[:, None] + eq.points[None, :, None] * (b - a)[:, None]
    L = mesh.edge_lengths[mesh.interior_edges]
    back = np.einsum("em,mq->eq", coef, chi) / np.sqrt(L)[:, None]
    exact = poly(pts[..., 0], pts[..., 1])
    if k >= 1:
        assert np.abs(back - exact).max() <= 1e-12
    # orthogonality of the residual to P_k(e)
    f = lambda x, y: np.cos(3 * x + y)
    coef = an.project_edge(f, mesh, k, 12)
    eq = an.quadrature_edge(12)
    chi = an.pk_edge_values(k, eq.points)
    pts = a[:, None] + eq.points[None, :, None] * (b - a)[:, None]
    back = np.einsum("em,mq->eq", coef, chi) / np.sqrt(L)[:, None]
    resid = np.einsum("q,eq,mq->em", eq.weights, f(pts[..., 0], pts[..., 1]) - back, chi)
    assert np.abs(resid).max() <= 1e-12


@pytest.mark.parametrize("k", [0, 1, 2])
def test_rt_interpolant_keeps_constants(k):
    mesh = jittered(2, seed=2)
    field = lambda x, y: np.stack(np.broadcast_arrays(0.3 + 0 * x, -1.2 + 0 * y), -1)
    sig = an.project_rt(field, mesh, k)
    tri = an.Triple(mesh, k, sig, np.zeros((mesh.n_cells, (k + 1) * (k + 2) // 2)),
                    np.zeros((mesh.n_interior_edges, k + 1)))
    assert an.broken_l2_norm("sigma", tri, field) <= 1e-12


@pytest.mark.parametrize("k", [0, 1, 2])
def test_commuting_property(k):
    mesh = jittered(2, seed=4)
    field = lambda x, y: np.stack([np.sin(x + y) * y, np.exp(x) * y**2], -1)
    div = lambda x, y: np.cos(x + y) * y + 2 * np.exp(x) * y
    deg = 2 * k + 10
    tri = an.Triple(mesh, k, an.project_rt(field, mesh, k, deg), an.project_pk(div, mesh, k, deg),
                    np.zeros((mesh.n_interior_edges, k + 1)))
    d = an.divergence_values(tri, deg)
    pu = an.tabulate_discrete(tri, deg)["u"]
    assert an.broken_l2(mesh, deg, d - pu) <= 1e-11


def test_projection_rates():
    rep = an.projection_study(plane_wave(5.0), 1, [4, 8, 16])
    for key in ("u", "sigma", "div_sigma"):
        assert abs(rep.rates[key][-1] - 2) < 0.2


# ---- norms


def test_broken_l2_examples():
    mesh = generate_structured(3)
    assert an.broken_l2_norm("u", None, lambda x, y: 0 * x, mesh=mesh) == 0.0
    assert math.isclose(an.broken_l2_norm("u", None, lambda x, y: 1 + 0 * x, mesh=mesh), 1.0, rel_tol=1e-14)
    with pytest.raises(ValueError):
        an.broken_l2_norm("p", None, None, mesh=mesh)


@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
def test_broken_l2_against_adaptive_quadrature():
    mesh = jittered(1, seed=5)
    mesh = from_cells(mesh.vertices + np.array([[0, 0], [0.1, 0], [0, 0.05], [0, 0]]), mesh.cells)
    rng = np.random.default_rng(0)
    tri = an.Triple.random(mesh, 2, rng)
    deg = 6
    B, b, det = mesh.affine_maps()
    total = 0.0
    for c in range(mesh.n_cells):
        def f(yh, xh):
            v = pk_cell_values(2, np.array([[xh, yh]]))[:, 0] @ tri.u[c] / np.sqrt(det[c])
            return abs(v) ** 2 * det[c]
        total += integrate.dblquad(f, 0, 1, 0, lambda x: 1 - x, epsabs=1e-14, epsrel=1e-13)[0]
    assert math.isclose(an.broken_l2_norm("u", tri, degree=deg), math.sqrt(total), rel_tol=1e-12)


def test_energy_norm_hand_value():
    mesh = generate_structured(4)
    k = 0
    tri = an.Triple.zeros(mesh, k)
    u = an.project_pk(lambda x, y: 1 + 0 * x, mesh, k)
    lam = an.project_edge(lambda x, y: 1 + 0 * x, mesh, k)
    tri = an.Triple(mesh, k, tri.sigma, u, lam)
    assert math.isclose(an.energy_norm(tri, 1.0), math.sqrt(1 + 4 / mesh.h), rel_tol=1e-12)
    assert an.energy_norm(an.Triple.zeros(mesh, 1), 3.0) == 0.0


@pytest.mark.parametrize("alpha", [-2.5, 0.1, 3.0])
def test_energy_norm_homogeneous(alpha):
    mesh = generate_structured(2)
    tri = an.Triple.random(mesh, 1, np.random.default_rng(1))
    assert math.isclose(an.energy_norm(alpha * tri, 5.0), abs(alpha) * an.energy_norm(tri, 5.0), rel_tol=1e-12)


def test_energy_gram_matches_norm():
    mesh = jittered(2, seed=6)
    N = an.energy_gram(mesh, 1, 4.0)
    tri = an.Triple.random(mesh, 1, np.random.default_rng(2))
    x = tri.vector()
    assert math.isclose(np.sqrt((x.conj() @ N @ x).real), an.energy_norm(tri, 4.0), rel_tol=1e-12)


# ---- the form


@pytest.mark.parametrize("k", [0, 1])
def test_form_matches_monolithic_matrix(k):
    mesh = jittered(2, seed=7)
    K, _ = monolithic_system(mesh, build_reference(k), 3.0)
    rng = np.random.default_rng(3)
    for _ in range(5):
        x, y = an.Triple.random(mesh, k, rng), an.Triple.random(mesh, k, rng)
        val = an.evaluate_form_A(x, y, 3.0)
        ref = y.vector().conj() @ (K @ x.vector())
        assert abs(val - ref) <= 1e-12 * abs(ref)
    assert an.evaluate_form_A(an.Triple.zeros(mesh, k), y, 3.0) == 0


def test_energy_identity_real_and_corrected():
    mesh = generate_structured(4)
    rng = np.random.default_rng(0)
    for _ in range(10):
        r = energy_identity(an.Triple.random(mesh, 1, rng, real=True), 5.0)
        assert r["residual"] <= 1e-12
        r = energy_identity(an.Triple.random(mesh, 1, rng), 5.0)
        assert r["corrected_residual"] <= 1e-12


def test_boundedness_constant_stable():
    a = an.stability_probe(generate_structured(2), 0, 5.0, n_samples=30)
    b = an.stability_probe(generate_structured(4), 0, 5.0, n_samples=30)
    assert abs(a.C_A_estimate - b.C_A_estimate) <= 0.2 * b.C_A_estimate
    assert a.C_A_sampled <= a.C_A_estimate * (1 + 1e-10)
    assert a.c_A_estimate > 0 and b.c_A_estimate > 0
    assert abs(a.c_A_estimate - b.c_A_estimate) < 0.25 * b.c_A_estimate


def test_schur_spectrum_structure():
    s = an.schur_spectrum(generate_structured(2), 0, 5.0)
    assert s["symmetry_residual"] <= 1e-12
    assert s["iS_imag_fraction"] <= 1e-12
    assert s["size"] == 8


# ---- probes


def test_consistency_exact_for_constants():
    r = an.check_consistency(polynomial_case(0, 3.0), generate_structured(3), 1)
    assert max(r.residuals.values()) <= 1e-11


@pytest.mark.parametrize("k", [0, 1])
def test_consistency_plane_wave(k):
    r = an.check_consistency(plane_wave(5.0), generate_structured(4), k)
    s = r.estimates["scale"]
    assert r.residuals["v_slot"] <= 1e-10 * s and r.residuals["mu_slot"] <= 1e-10 * s
    assert r.residuals["tau_slot_minus_mass"] <= 1e-10 * s
    assert r.residuals["tau_mass_term"] > 1e-6 * s  # the mass term itself is not trivially zero


def test_conservation_cases():
    sol = solve(generate_structured(3), 1, 4.0)
    c = an.check_conservation(sol)
    assert c.residuals["max_local"] == 0 and c.residuals["global"] == 0
    case = polynomial_case(0, 3.0)
    sol = solve(generate_structured(3), 1, 3.0, case.source, case.boundary)
    c = an.check_conservation(sol, case.source, case.boundary)
    assert c.residuals["max_local"] <= 1e-12 * c.estimates["data_scale"]
    case = sine_product(5.0)
    sol = solve(generate_structured(8), 0, 5.0, case.source, case.boundary)
    c = an.check_conservation(sol, case.source, case.boundary)
    assert c.residuals["max_local"] <= 1e-10 * c.estimates["data_scale"]


def test_lifting_zero_and_moments():
    mesh = jittered(3, seed=8)
    r = an.lifting_probe(np.zeros(3), np.zeros((3, 2)), mesh, 0, 1)
    assert not r.tau_tilde.any()
    rng = np.random.default_rng(0)
    for k in (0, 1):
        n_p = (k + 1) * (k + 2) // 2
        for c in range(0, mesh.n_cells, 3):
            r = an.lifting_probe(rng.standard_normal(n_p), rng.standard_normal((3, k + 1)), mesh, c, k)
            assert np.abs(r.moment_residuals).max() <= 1e-11


def test_lifting_constant_mesh_independent():
    a, ra = an.lifting_constant(generate_structured(4), 1)
    b, rb = an.lifting_constant(generate_structured(8), 1)
    assert max(ra, rb) <= 1e-11
    assert abs(a - b) < 0.1 * b


def test_projected_error_bound_exact_case():
    r = an.check_projected_error_bound(polynomial_case(0, 3.0), generate_structured(3), 1)
    assert r["exact_case"] and r["ratio"] is None


def test_json_conversion():
    out = an.to_jsonable({"a": np.float64(1.5), "b": 2 + 1j, "c": np.arange(2), "d": float("nan")})
    assert out == {"a": 1.5, "b": [2.0, 1.0], "c": [0, 1], "d": None}
