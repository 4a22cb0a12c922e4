import numpy as np
import pytest
from scipy.optimize import brentq

from hrtmdg.mesh import generate_structured
from hrtmdg.solver import condensed_system


def min_eig_iS(kappa, n=2, k=0):
    """Smallest eigenvalue of i S, which is real symmetric for real kappa."""
    S = condensed_system(generate_structured(n), k, kappa).matrix.toarray()
    return np.linalg.eigvalsh((1j * S).real).min()


@pytest.fixture(scope="session")
def resonant_kappa():
    """A wavenumber at which the n=2, k=0 multiplier matrix is singular."""
    return brentq(min_eig_iS, 4.5, 4.6, xtol=1e-15)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
