"""Manufactured solutions and the convergence-study driver."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mesh import generate_structured

RESONANCE_GAP = 0.5
EXACT_FLOOR = 1e-12
CSV_HEADER = ["case", "k", "kappa", "n", "h", "err_u", "err_sigma", "err_energy",
              "rate_u", "rate_sigma", "const_norm"]


class ResonanceError(ValueError):
    pass


@dataclass(frozen=True)
class ManufacturedCase:
    """Exact solution of  Laplace(u) + kappa^2 u = f~,  u = g on the boundary.

    All evaluators take coordinate arrays ``(x, y)``; ``grad`` returns a
    ``(..., 2)`` array.
    """

    name: str
    kappa: float
    u: Callable
    grad: Callable
    source: Callable  # f~
    laplacian: Callable
    regularity: float = math.inf
    params: dict = field(default_factory=dict)

    def boundary(self, x, y):
        return self.u(x, y)

    def sigma(self, x, y):
        return 1j * self.grad(x, y) / self.kappa

    def div_sigma(self, x, y):
        return 1j * self.laplacian(x, y) / self.kappa

    def f(self, x, y):
        """First-order source  f = i f~ / kappa."""
        return 1j * np.asarray(self.source(x, y)) / self.kappa

    def self_check(self, n_samples=20, seed=0, step=1e-4, rtol=1e-5):
        """PDE residual by finite-difference Laplacian and gradient; raises on failure."""
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(0.05, 0.95, (2, n_samples))
        u = self.u
        lap = (u(x + step, y) + u(x - step, y) + u(x, y + step) + u(x, y - step) - 4 * u(x, y)) / step**2
        scale = self.kappa**2 * np.max(np.abs(u(x, y))) + np.max(np.abs(self.source(x, y))) + 1.0
        pde = np.max(np.abs(lap + self.kappa**2 * u(x, y) - self.source(x, y))) / scale
        lap_exact = np.max(np.abs(self.laplacian(x, y) - lap)) / scale
        g = self.grad(x, y)
        fd = np.stack([(u(x + step, y) - u(x - step, y)), (u(x, y + step) - u(x, y - step))], -1) / (2 * step)
        gscale = np.max(np.abs(g)) + 1.0
        grad_err = np.max(np.abs(fd - g)) / gscale
        bad = {name: v for name, v in (("pde", pde), ("laplacian", lap_exact), ("gradient", grad_err))
               if not v <= rtol}
        if bad:
            raise AssertionError(f"manufactured case {self.name} fails self-check: {bad}")
        return {"pde": pde, "laplacian": lap_exact, "gradient": grad_err}


def dirichlet_gap(kappa, mmax=None):
    """Distance of kappa^2 from the Dirichlet-Laplacian spectrum pi^2 (m^2 + n^2) of the unit square."""
    k2 = kappa**2
    mmax = mmax or int(kappa / math.pi) + 2
    m = np.arange(1, mmax + 1)
    eig = math.pi**2 * (m[:, None] ** 2 + m[None, :] ** 2)
    return float(np.min(np.abs(eig - k2)))


def check_resonance(kappa, gap=RESONANCE_GAP):
    d = dirichlet_gap(kappa)
    if d < gap:
        raise ResonanceError(f"kappa={kappa:g}: kappa^2 lies within {d:.3g} of a Dirichlet eigenvalue "
                             f"of the unit square (minimum gap {gap})")
    return d


def plane_wave(kappa, theta=math.pi / 8):
    """u = exp(i kappa (x cos(theta) + y sin(theta))), source-free."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    d = np.array([math.cos(theta), math.sin(theta)])

    def u(x, y):
        return np.exp(1j * kappa * (d[0] * np.asarray(x) + d[1] * np.asarray(y)))

    def grad(x, y):
        return 1j * kappa * u(x, y)[..., None] * d

    return ManufacturedCase("plane_wave", kappa, u, grad,
                            source=lambda x, y: np.zeros(np.broadcast(x, y).shape, dtype=complex),
                            laplacian=lambda x, y: -kappa**2 * u(x, y),
                            params={"theta": theta})


def sine_product(kappa, gap=RESONANCE_GAP):
    """u = sin(pi x) sin(pi y), homogeneous Dirichlet data."""
    check_resonance(kappa, gap)
    pi = math.pi

    def u(x, y):
        return np.sin(pi * np.asarray(x)) * np.sin(pi * np.asarray(y))

    def grad(x, y):
        x, y = np.asarray(x), np.asarray(y)
        return pi * np.stack([np.cos(pi * x) * np.sin(pi * y), np.sin(pi * x) * np.cos(pi * y)], -1)

    return ManufacturedCase("sine_product", kappa, u, grad,
                            source=lambda x, y: (kappa**2 - 2 * pi**2) * u(x, y),
                            laplacian=lambda x, y: -2 * pi**2 * u(x, y))


def polynomial_case(p, kappa):
    """u = 1 (p = 0), x (p = 1), x^p + x y^(p-1) (p >= 2)."""
    if p < 0:
        raise ValueError("polynomial degree must be >= 0")

    def mono(x, a):
        return np.asarray(x, dtype=float) ** a if a > 0 else np.ones_like(np.asarray(x, dtype=float))

    terms = [(1.0, p, 0)] if p > 0 else [(1.0, 0, 0)]
    if p >= 2:
        terms.append((1.0, 1, p - 1))

    def u(x, y):
        return sum(c * mono(x, a) * mono(y, b) for c, a, b in terms)

    def grad(x, y):
        gx = sum(c * a * mono(x, a - 1) * mono(y, b) for c, a, b in terms if a)
        gy = sum(c * b * mono(x, a) * mono(y, b - 1) for c, a, b in terms if b)
        zero = np.zeros(np.broadcast(x, y).shape)
        return np.stack([zero + gx, zero + gy], -1)

    def lap(x, y):
        out = np.zeros(np.broadcast(x, y).shape)
        for c, a, b in terms:
            if a >= 2:
                out = out + c * a * (a - 1) * mono(x, a - 2) * mono(y, b)
            if b >= 2:
                out = out + c * b * (b - 1) * mono(x, a) * mono(y, b - 2)
        return out

    return ManufacturedCase(f"polynomial_p{p}", kappa, u, grad,
                            source=lambda x, y: lap(x, y) + kappa**2 * u(x, y),
                            laplacian=lap, params={"p": p})


CASES = {"plane_wave": plane_wave, "sine_product": sine_product}


def make_case(name, kappa, **params):
    if name in CASES:
        return CASES[name](kappa, **params)
    if name.startswith("polynomial"):
        p = params.get("p", int(name[len("polynomial_p"):]) if name.startswith("polynomial_p") else 0)
        return polynomial_case(p, kappa)
    raise ValueError(f"unknown case {name!r}")


def compute_rate(errors, hs, floor=EXACT_FLOOR):
    """Observed orders log(e_i / e_{i+1}) / log(h_i / h_{i+1}).

    Pairs where either error is at or below ``floor`` give ``None`` (the
    discretization is exact there and no rate is defined).
    """
    errors = np.asarray(errors, dtype=float)
    hs = np.asarray(hs, dtype=float)
    if len(errors) != len(hs) or len(errors) < 2:
        raise ValueError("need matching error and h sequences of length >= 2")
    if np.any(hs <= 0):
        raise ValueError("mesh sizes must be positive")
    rates = []
    for i in range(len(errors) - 1):
        if errors[i] <= floor or errors[i + 1] <= floor:
            rates.append(None)
        else:
            rates.append(float(np.log(errors[i] / errors[i + 1]) / np.log(hs[i] / hs[i + 1])))
    return rates


@dataclass
class ConvergenceRow:
    case: str
    k: int
    kappa: float
    n: int
    h: float
    err_u: float
    err_sigma: float
    err_energy: float
    rate_u: float | None = None
    rate_sigma: float | None = None
    const_norm: float = float("nan")


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)
    error: str | None = None

    def for_kappa(self, kappa):
        return [r for r in self.rows if r.kappa == kappa]

    def finest_rates(self, kappa):
        rows = self.for_kappa(kappa)
        return rows[-1].rate_u, rows[-1].rate_sigma

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else (
            repr(v) if isinstance(v, float) else str(v))
        for r in self.rows:
            w.writerow([r.case, r.k, fmt(float(r.kappa)), r.n, fmt(r.h), fmt(r.err_u), fmt(r.err_sigma),
                        fmt(r.err_energy), fmt(r.rate_u), fmt(r.rate_sigma), fmt(r.const_norm)])
        return buf.getvalue()


def run_convergence(case_factory, k, levels, kappas, *, solver_options=None, quad_degree=None):
    """Solve on structured meshes n in ``levels`` for each kappa and tabulate errors.

    ``case_factory(kappa)`` builds the manufactured case. On a solver
    failure the partial table is returned with ``error`` set.
    """
    from .analysis import errors_against_case
    from .solver import solve

    levels = list(levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    for kappa in kappas:
        check_resonance(kappa)
    table = ConvergenceTable()
    opts = dict(solver_options or {})
    for kappa in kappas:
        case = case_factory(kappa)
        case.self_check()
        rows = []
        for n in levels:
            mesh = generate_structured(n)
            try:
                sol = solve(mesh, k, kappa, case.source, case.boundary, quad_degree=quad_degree, **opts)
            except Exception as err:  # noqa: BLE001 - reported in the partial table
                table.error = f"kappa={kappa:g} n={n}: {err}"
                table.rows.extend(rows)
                return table
            errs = errors_against_case(sol, case)
            h = mesh.h
            rows.append(ConvergenceRow(case.name, k, kappa, n, h, errs["u"], errs["sigma"], errs["energy"],
                                       const_norm=errs["sigma"] / (h ** (k + 1) * kappa ** (k + 1))))
        if len(rows) >= 2:
            hs = [r.h for r in rows]
            ru = compute_rate([r.err_u for r in rows], hs)
            rs = compute_rate([r.err_sigma for r in rows], hs)
            for r, a, b in zip(rows[1:], ru, rs):
                r.rate_u, r.rate_sigma = a, b
        table.rows.extend(rows)
    return table
