import math

import numpy as np
import pytest

from d4qms import dihedral as d4
from d4qms.circuits import (
    CircuitFragment,
    Gate,
    QpeGrid,
    TrotterParams,
    adjoint_fragment,
    apply_fragment,
    fragment_matrix,
    gate_fourier,
    gate_inverse,
    gate_mult,
    gate_trace_phase,
    inverse_qft_fragment,
    kinetic_step,
    plaquette_basis_change,
    qpe_coefficient,
    qpe_coefficient_table,
    qpe_unitary,
    trotter_evolution,
    trotter_unit,
)
from d4qms.statevector import RegisterLayout, StateVector, register_probabilities


def link_layout(n_links=1):
    return RegisterLayout.standard(n_links)


def test_fourier_gate_matches_group_transform():
    mat = fragment_matrix(gate_fourier((0, 1, 2)), 3)
    assert np.allclose(mat, d4.FOURIER, atol=1e-12)
    adj = fragment_matrix(gate_fourier((0, 1, 2), adjoint=True), 3)
    assert np.allclose(adj, d4.FOURIER.T, atol=1e-12)


def test_inverse_gate_permutes_group_elements():
    mat = fragment_matrix(gate_inverse((0, 1, 2)), 3)
    for g in range(8):
        assert mat[d4.inv(g), g] == pytest.approx(1.0)


def test_mult_gate_left_multiplies_destination():
    frag = gate_mult((0, 1, 2), (3, 4, 5))
    layout = RegisterLayout({"src": (0, 1, 2), "dst": (3, 4, 5)})
    for g in (0, 3, 5):
        for h in (1, 4, 6):
            state = StateVector.computational_basis(layout, g | (h << 3))
            apply_fragment(state, frag)
            target = g | (d4.mul(g, h) << 3)
            assert state.amps[target] == pytest.approx(1.0)


def test_trace_phase_gate_values():
    theta = 0.37
    mat = fragment_matrix(gate_trace_phase((0, 1, 2), theta), 3)
    diag = np.diag(mat)
    tr = d4.FUND_REP.trace(axis1=1, axis2=2)
    assert np.allclose(diag, np.exp(1j * theta * tr), atol=1e-12)


def test_kinetic_step_matches_matrix_exponential():
    dt, coupling = 0.21, 0.8
    mat = fragment_matrix(kinetic_step((0, 1, 2), dt, coupling), 3)
    h = d4.kinetic_link_hamiltonian(coupling)
    vals, vecs = np.linalg.eigh(h)
    expected = (vecs * np.exp(-1j * dt * vals)) @ vecs.T
    assert np.allclose(mat, expected, atol=1e-12)


def test_adjoint_fragment_inverts(model):
    layout = RegisterLayout.standard(4)
    frag = trotter_unit(layout, model.lattice, 0.3, 0.8)
    rng = np.random.default_rng(8)
    amps = rng.normal(size=4096) + 1j * rng.normal(size=4096)
    amps /= np.linalg.norm(amps)
    state = StateVector(layout, amps.copy())
    apply_fragment(state, frag)
    apply_fragment(state, adjoint_fragment(frag))
    assert np.abs(state.amps - amps).max() < 1e-12


def test_trotter_evolution_second_order(model, exact_unit):
    t = 1.0
    layout = RegisterLayout.standard(4)
    rng = np.random.default_rng(12)
    amps = rng.normal(size=4096) + 1j * rng.normal(size=4096)
    amps /= np.linalg.norm(amps)
    exact = exact_unit(t) @ amps

    def error(n):
        state = StateVector(layout, amps.copy())
        apply_fragment(state, trotter_evolution(layout, model.lattice, t, n, 0.8))
        return np.linalg.norm(state.amps - exact)

    ratio = error(5) / error(10)
    assert ratio == pytest.approx(4.0, rel=0.25)


def test_qpe_grid_geometry():
    grid = QpeGrid(3, -13.0, 0.0)
    assert grid.size == 8
    assert grid.energies[0] == -13.0
    assert grid.energies[-1] == 0.0
    assert grid.spacing == pytest.approx(13.0 / 7.0)
    # top of the range maps to phase (N-1)/N, never wrapping to zero
    assert grid.phase_fraction(0.0) == pytest.approx(7.0 / 8.0)
    assert grid.unit_time < 0
    with pytest.raises(ValueError):
        QpeGrid(3, 0.0, 0.0)


def test_qpe_coefficients_normalized_and_peaked():
    grid = QpeGrid(4, -13.0, 0.0)
    table = qpe_coefficient_table(np.array([-12.1, -7.3, -0.4]), grid)
    assert table.shape == (16, 3)
    assert np.allclose(table.sum(axis=0), 1.0, atol=1e-12)
    # an on-grid energy is estimated exactly
    on_site = qpe_coefficient(grid.energy_of(5), np.arange(16), grid)
    assert on_site[5] == pytest.approx(1.0, abs=1e-12)
    assert np.abs(np.delete(on_site, 5)).max() < 1e-12


def test_inverse_qft_decodes_phase_states():
    q = 3
    n = 1 << q
    layout = RegisterLayout({"e": tuple(range(q))})
    frag = inverse_qft_fragment(range(q))
    for j in range(n):
        amps = np.exp(2j * math.pi * j * np.arange(n) / n) / math.sqrt(n)
        state = StateVector(layout, amps)
        apply_fragment(state, frag)
        assert abs(state.amps[j]) == pytest.approx(1.0, abs=1e-12)


def test_plaquette_basis_change_matches_loop_composition(model):
    layout = RegisterLayout.standard(4)
    rng = np.random.default_rng(3)
    for p_index in (0, 1):
        s_frag, s_adj, central = plaquette_basis_change(layout, model.lattice, p_index)
        loop_vals = model.loop_values(model.lattice.plaquettes[p_index])
        for b in rng.integers(0, 4096, size=60):
            b = int(b)
            state = StateVector.computational_basis(layout, b)
            apply_fragment(state, s_frag)
            target = np.argmax(np.abs(state.amps))
            assert state.amps[target] == pytest.approx(1.0)
            # central register now holds the full loop value; the other
            # three links are untouched
            digit = (target >> (3 * central)) & 7
            assert digit == loop_vals[b]
            mask = ~(7 << (3 * central))
            assert (target & mask) == (b & mask)
            apply_fragment(state, s_adj)
            assert state.amps[b] == pytest.approx(1.0)


def test_qpe_on_exact_eigenstate(model, spectrum, exact_unit):
    grid = QpeGrid(3, -13.0, 0.0)
    layout = RegisterLayout.standard(4, q_e=3)
    unit = exact_unit(grid.unit_time)
    col = spectrum.level_slices[7].start
    psi = spectrum.vectors[:, col]
    amps = np.zeros(layout.dim, dtype=complex)
    amps[:4096] = psi
    state = StateVector(layout, amps)
    qpe_unitary(state, layout, grid, unit_matrix=unit)
    probs = register_probabilities(state, layout["energy"])
    expected = qpe_coefficient(spectrum.energies[7], np.arange(8), grid)
    assert np.abs(probs - expected).max() < 1e-12


def test_trotter_params_validation():
    with pytest.raises(ValueError):
        TrotterParams(0)
    grid = QpeGrid(4)
    assert TrotterParams(5).unit_time(grid) == grid.unit_time
    assert TrotterParams(5, base_time=-2.0).unit_time(grid) == -2.0


def test_fragment_json_roundtrip(model):
    layout = RegisterLayout.standard(4)
    frag = trotter_unit(layout, model.lattice, 0.17, 0.8)
    back = CircuitFragment.from_json(frag.to_json())
    assert list(back) == list(frag)
    assert len(back) == len(frag)


def test_fragment_concatenation():
    a = CircuitFragment([Gate("hadamard", (0,))])
    b = CircuitFragment([Gate("x", (1,))])
    combo = a + b
    assert [g.name for g in combo] == ["hadamard", "x"]
