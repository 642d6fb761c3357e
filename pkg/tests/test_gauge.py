import numpy as np
import pytest

from d4qms import dihedral as d4
from d4qms.gauge import GaugeModel, HamiltonianSpec, LatticeSpec


def test_two_by_one_geometry():
    lat = LatticeSpec.two_by_one()
    assert lat.n_links == 4
    assert lat.n_plaquettes == 2
    assert lat.links == ((0, 1), (0, 0), (1, 1), (1, 0))
    assert len(lat.cycles) == 3
    # faces share the horizontal link twice because of the periodic wrap
    for loop in lat.plaquettes:
        assert len(loop) == 4


def test_rectangle_generalization_is_closed():
    lat = LatticeSpec.rectangle(3, 2)
    assert lat.n_links == 12
    assert lat.n_plaquettes == 6
    # one independent cycle per chord of a spanning tree
    assert len(lat.cycles) == lat.n_links - lat.n_vertices + 1


def test_loop_family_breaks_link_inversion_symmetry(model):
    lat = model.lattice
    family = lat.loop_family()
    assert len(family) == 6
    assert family[: len(lat.cycles)] == lat.cycles
    for loop in family:
        lat._check_closed(loop)

    # permutation of the extended space that inverts every link variable
    digits = model.link_digits
    inverted = np.zeros(model.dim, dtype=np.int64)
    for l in range(lat.n_links):
        inverted += d4.INV_TABLE[digits[l]] * 8**l

    for loop in family:
        tr = model.loop_re_trace(loop)
        for gather in model.gauge_gathers:
            assert np.array_equal(tr[gather], tr)

    # every bare cycle trace is blind to the inversion; the decorated
    # windings are what give the move generator a handle on it
    for loop in lat.cycles:
        tr = model.loop_re_trace(loop)
        assert np.array_equal(tr[inverted], tr)
    asymmetric = [
        loop
        for loop in family[len(lat.cycles) :]
        if not np.array_equal(model.loop_re_trace(loop)[inverted], model.loop_re_trace(loop))
    ]
    assert len(asymmetric) >= 2


def test_loop_values_compose_group_elements(model):
    lat = model.lattice
    digits = model.link_digits
    for p in range(2):
        loop = lat.plaquettes[p]
        values = model.loop_values(loop)
        # brute-force composition, newest factor multiplied from the left
        expected = np.zeros(model.dim, dtype=np.int64)
        for b in range(model.dim):
            g = 0
            for link, expo in loop:
                factor = digits[link][b] if expo > 0 else d4.INV_TABLE[digits[link][b]]
                g = d4.mul(factor, g)
            expected[b] = g
        assert np.array_equal(values, expected)


def test_loop_re_trace_outcomes(model):
    retr = model.loop_re_trace(model.lattice.plaquettes[0])
    assert set(np.unique(retr)) <= {-2.0, 0.0, 2.0}


def test_gauge_gathers_identity_row(model):
    gathers = model.gauge_gathers
    assert gathers.shape == (64, model.dim)
    assert np.array_equal(gathers[0], np.arange(model.dim))


def test_hamiltonian_commutes_with_gauge_transforms(model):
    rng = np.random.default_rng(2)
    psi = rng.normal(size=model.dim)
    psi /= np.linalg.norm(psi)
    h = model.hamiltonian_matrix
    hpsi = h @ psi
    for assignment in ((1, 4), (5, 2), (7, 7)):
        perm = model.gauge_transform_permutation(assignment)
        assert np.allclose((h @ psi[perm]), hpsi[perm], atol=1e-10)


def test_hamiltonian_decomposition(model):
    rng = np.random.default_rng(4)
    psi = rng.normal(size=model.dim) + 1j * rng.normal(size=model.dim)
    direct = model.hamiltonian_matrix @ psi
    split = model.magnetic_diagonal * psi + model.apply_kinetic(psi)
    assert np.allclose(direct, split, atol=1e-10)
    assert np.allclose(model.hamiltonian_matrix, model.hamiltonian_matrix.T, atol=1e-12)


def test_physical_projector_properties(model):
    p = model.physical_projector
    assert np.allclose(p, p.T, atol=1e-12)
    assert np.allclose(p @ p, p, atol=1e-10)
    rank = int(round(np.trace(p)))
    assert rank == 176
    assert model.physical_dim_closed_form() == 176
    # the projector commutes with the Hamiltonian
    h = model.hamiltonian_matrix
    assert np.abs(p @ h - h @ p).max() < 1e-10


def test_gauge_residual_detects_noninvariance(model):
    uniform = np.full(model.dim, 1.0 / np.sqrt(model.dim), dtype=complex)
    assert model.gauge_residual(uniform) < 1e-14
    basis = np.zeros(model.dim, dtype=complex)
    basis[1] = 1.0
    assert model.gauge_residual(basis) > 0.1


def test_exact_spectrum_structure(model, spectrum):
    assert int(spectrum.multiplicities.sum()) == 176
    assert spectrum.physical_dim == 176
    v = spectrum.vectors
    assert np.allclose(v.T @ v, np.eye(176), atol=1e-8)
    h = model.hamiltonian_matrix
    for k, sl in enumerate(spectrum.level_slices):
        block = v[:, sl]
        assert np.abs(h @ block - spectrum.energies[k] * block).max() < 1e-8
        assert spectrum.level_of_column(sl.start) == k
    assert np.all(np.diff(spectrum.energies) > 0)


def test_spectrum_extrema_regression(spectrum):
    assert spectrum.energies[0] == pytest.approx(-11.171665111121, abs=1e-9)
    assert spectrum.energies[-1] == pytest.approx(-1.997720493029, abs=1e-9)
    assert len(spectrum.energies) == 51


def test_thermal_limits(model, spectrum):
    w0 = model.thermal_weights(0.0)
    assert np.allclose(w0, spectrum.multiplicities / 176.0)
    # strong damping concentrates on the ground level; the first gap is
    # only ~0.013 so beta must be large
    assert model.thermal_weights(2500.0)[0] == pytest.approx(1.0, abs=1e-9)
    assert model.thermal_energy(2500.0) == pytest.approx(spectrum.energies[0], abs=1e-7)


def test_plaquette_probs_normalized(model):
    probs = model.plaquette_eigenspace_probs(1e-7)
    total = probs[-2.0] + probs[0.0] + probs[2.0]
    assert total == pytest.approx(1.0, abs=1e-10)
    assert probs[-2.0] == pytest.approx(probs[2.0], abs=1e-5)
    assert probs["mean"] == pytest.approx(3.0 * probs["reported_mean"])
    # both faces carry the same thermal statistics by translation symmetry
    other = model.plaquette_eigenspace_probs(1e-7, plaquette_index=1)
    assert other[0.0] == pytest.approx(probs[0.0], abs=1e-10)


def test_casimir_matching(model):
    assert model.casimir_matching_residual(0.8) < 1e-12
