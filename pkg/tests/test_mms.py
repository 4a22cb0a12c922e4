import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hrtmdg.mms import (ResonanceError, check_resonance, compute_rate, dirichlet_gap, make_case, plane_wave,
                        polynomial_case, run_convergence, sine_product)


@pytest.mark.parametrize("errors, hs, rates", [
    ([4, 1, 0.25], [1, 0.5, 0.25], [2.0, 2.0]),
    ([1, 0.5], [1, 0.5], [1.0]),
    ([1, 0.25], [1, 0.5], [2.0]),
    ([1e-13, 1e-13], [1, 0.5], [None]),
])
def test_compute_rate_examples(errors, hs, rates):
    got = compute_rate(errors, hs)
    assert len(got) == len(rates)
    for g, r in zip(got, rates):
        assert (g is None and r is None) or math.isclose(g, r, rel_tol=1e-12)


@given(st.floats(0.1, 5.0), st.floats(1e-3, 1e3), st.floats(0.1, 1.0),
       st.lists(st.floats(1.2, 4.0), min_size=1, max_size=4))
@settings(max_examples=50, deadline=None)
def test_compute_rate_recovers_power_law(p, C, h0, ratios):
    hs = list(h0 / np.cumprod([1.0] + ratios))
    errors = [C * h**p for h in hs]
    rates = compute_rate(errors, hs)
    expected = [None if min(a, b) <= 1e-12 else p for a, b in zip(errors, errors[1:])]
    for r, e in zip(rates, expected):
        assert (r is None) == (e is None)
        if r is not None:
            assert math.isclose(r, e, rel_tol=1e-8)


def test_compute_rate_validation():
    with pytest.raises(ValueError):
        compute_rate([1.0], [1.0])
    with pytest.raises(ValueError):
        compute_rate([1.0, 0.5], [1.0, 0.0])


def test_sine_product_values():
    c = sine_product(5.0)
    assert math.isclose(c.source(0.5, 0.5), 25 - 2 * math.pi**2, rel_tol=1e-14)
    assert abs(c.source(0.5, 0.5) - 5.261) < 1e-3
    assert np.allclose(c.sigma(0.5, 0.5), 0.0, atol=1e-15)
    t = np.linspace(0, 1, 7)
    for x, y in ((t, 0 * t), (t, 0 * t + 1), (0 * t, t), (0 * t + 1, t)):
        assert np.abs(c.boundary(x, y)).max() < 1e-15


@pytest.mark.parametrize("theta", [0.0, math.pi / 8, 1.0])
def test_plane_wave_values(theta):
    c = plane_wave(7.0, theta)
    assert np.allclose(c.sigma(0.0, 0.0), [-math.cos(theta), -math.sin(theta)])
    x, y = np.random.default_rng(0).random((2, 10))
    assert np.allclose(np.abs(c.u(x, y)), 1.0)
    assert np.allclose(c.laplacian(x, y) + 49.0 * c.u(x, y), 0.0)
    assert not np.any(c.source(x, y))


@pytest.mark.parametrize("factory", [lambda: plane_wave(5.0), lambda: sine_product(5.0),
                                     lambda: polynomial_case(0, 3.0), lambda: polynomial_case(1, 3.0),
                                     lambda: polynomial_case(3, 2.0)])
def test_self_check(factory):
    factory().self_check()


def test_self_check_detects_wrong_source():
    c = sine_product(5.0)
    broken = c.__class__(c.name, c.kappa, c.u, c.grad, lambda x, y: c.source(x, y) + 1.0, c.laplacian)
    with pytest.raises(AssertionError):
        broken.self_check()


def test_polynomial_sources():
    x, y = np.random.default_rng(1).random((2, 5))
    assert np.allclose(polynomial_case(0, 3.0).source(x, y), 9.0)
    assert np.allclose(polynomial_case(1, 3.0).source(x, y), 9.0 * x)
    # u = x^2 + x y: Laplacian 2
    assert np.allclose(polynomial_case(2, 3.0).source(x, y), 2 + 9 * (x**2 + x * y))


def test_resonance_guard():
    resonant = math.pi * math.sqrt(2)
    assert dirichlet_gap(resonant) < 1e-12
    with pytest.raises(ResonanceError):
        sine_product(resonant)
    with pytest.raises(ResonanceError):
        check_resonance(math.pi * math.sqrt(5) + 1e-3)
    assert check_resonance(5.0) > 0.5


def test_make_case():
    assert make_case("plane_wave", 3.0).name == "plane_wave"
    assert make_case("polynomial_p2", 3.0).params["p"] == 2
    with pytest.raises(ValueError):
        make_case("nonsense", 3.0)


def test_run_convergence_table():
    table = run_convergence(sine_product, 0, [2, 4], [5.0])
    assert table.error is None and len(table.rows) == 2
    assert table.rows[0].rate_u is None and table.rows[1].rate_u is not None
    rows = list(csv.DictReader(io.StringIO(table.to_csv())))
    assert rows[0]["rate_u"] == "" and float(rows[1]["rate_u"]) > 0
    assert float(rows[1]["err_u"]) == table.rows[1].err_u


def test_run_convergence_single_level():
    table = run_convergence(sine_product, 0, [2], [5.0])
    assert table.rows[0].rate_u is None and table.rows[0].rate_sigma is None


def test_run_convergence_rejects_bad_levels():
    with pytest.raises(ValueError):
        run_convergence(sine_product, 0, [4, 2], [5.0])
