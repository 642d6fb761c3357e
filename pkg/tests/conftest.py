"""Shared fixtures.

The exact model diagonalization and the sampling-engine contexts are
expensive, so they are built once per session and shared across files.
"""

import numpy as np
import pytest

from d4qms.gauge import GaugeModel, HamiltonianSpec


@pytest.fixture(scope="session")
def model():
    return GaugeModel(HamiltonianSpec(inv_g2=0.8))


@pytest.fixture(scope="session")
def spectrum(model):
    return model.exact_spectrum


@pytest.fixture(scope="session")
def full_eigensystem(model):
    """Eigendecomposition of the full 4096-dim Hamiltonian (not just the
    physical sector); used to build exact evolution operators."""
    vals, vecs = np.linalg.eigh(model.hamiltonian_matrix)
    return vals, vecs


@pytest.fixture(scope="session")
def exact_unit(model, full_eigensystem):
    """Dense e^{-iHt} factory for arbitrary times."""
    vals, vecs = full_eigensystem

    def build(t: float) -> np.ndarray:
        return (vecs * np.exp(-1j * t * vals)) @ vecs.T

    return build


# one line per acceptance criterion, echoed after the test summary so the
# verdicts are visible even with output capture on
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
