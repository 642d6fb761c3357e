"""Circuit constructions over link registers.

Circuits are lists of named gates with explicit qubit targets, so they can
be serialized for debugging and replayed on any statevector with a
matching layout.  The vocabulary is small: group inversion and left
multiplication (basis permutations), the group Fourier gate, diagonal
phase gates, and the single-qubit gates needed for phase estimation.

Composite builders cover the plaquette basis change S, the potential and
kinetic factors of a Trotter step, full second-order Trotter evolution,
and Quantum Phase Estimation against a uniform energy grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import diric

from . import dihedral
from .statevector import (
    StateVector,
    apply_controlled,
    apply_diagonal,
    apply_unitary,
    measure,
    reset_qubits,
)


@dataclass(frozen=True)
class Gate:
    """One primitive operation: gate bit j acts on qubits[j]."""

    name: str
    qubits: tuple
    controls: tuple = ()
    params: tuple = ()


class CircuitFragment:
    """An ordered gate list; application order is list order."""

    def __init__(self, gates=()):
        self.gates = list(gates)

    def __iter__(self):
        return iter(self.gates)

    def __len__(self):
        return len(self.gates)

    def __add__(self, other):
        return CircuitFragment(self.gates + list(other))

    def append(self, gate: Gate):
        self.gates.append(gate)

    def extend(self, gates):
        self.gates.extend(gates)

    def to_json(self) -> str:
        return json.dumps(
            [[g.name, list(g.qubits), list(g.controls), list(g.params)] for g in self.gates]
        )

    @staticmethod
    def from_json(text: str) -> "CircuitFragment":
        return CircuitFragment(
            Gate(name, tuple(qs), tuple(cs), tuple(ps))
            for name, qs, cs, ps in json.loads(text)
        )


def _inverse_matrix() -> np.ndarray:
    m = np.zeros((8, 8))
    for g in range(8):
        m[dihedral.inv(g), g] = 1.0
    return m


def _mult_matrix() -> np.ndarray:
    # joint index packs src in bits 0-2, dst in bits 3-5
    m = np.zeros((64, 64))
    for g in range(8):
        for h in range(8):
            m[g | (dihedral.mul(g, h) << 3), g | (h << 3)] = 1.0
    return m


_INVERSE = _inverse_matrix()
_MULT = _mult_matrix()
_HADAMARD = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2.0)
_SWAP = np.array([[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=float)
_X = np.array([[0.0, 1.0], [1.0, 0.0]])
_FUND_TRACE = np.einsum("gaa->g", dihedral.FUND_REP)


def _kinetic_log_eigenvalues(coupling: float) -> np.ndarray:
    lam = dihedral.transfer_eigenvalues(coupling)
    return np.log(lam)[dihedral.SLOT_IRREPS]


def gate_action(gate: Gate):
    """Resolve a gate name to ("dense", matrix) or ("diag", phases)."""
    if gate.name == "inverse":
        return "dense", _INVERSE
    if gate.name == "mult":
        return "dense", _MULT
    if gate.name == "fourier":
        return "dense", dihedral.FOURIER
    if gate.name == "fourier_adj":
        return "dense", dihedral.FOURIER.T
    if gate.name == "hadamard":
        return "dense", _HADAMARD
    if gate.name == "swap":
        return "dense", _SWAP
    if gate.name == "x":
        return "dense", _X
    if gate.name == "phase":
        (theta,) = gate.params
        return "diag", np.array([1.0, np.exp(1j * theta)])
    if gate.name == "trace_phase":
        (theta,) = gate.params
        return "diag", np.exp(1j * theta * _FUND_TRACE)
    if gate.name == "kinetic_phase":
        dt, coupling = gate.params
        return "diag", np.exp(1j * dt * _kinetic_log_eigenvalues(coupling))
    raise ValueError(f"unknown gate {gate.name!r}")


def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    kind, payload = gate_action(gate)
    if kind == "diag":
        if gate.controls:
            # identity unless every control is 1: pad the phase table,
            # controls in the high bits of the joint subset value
            k = len(gate.controls)
            full = np.ones((1 << k) * payload.size, dtype=np.complex128)
            full[-payload.size:] = payload
            return apply_diagonal(state, list(gate.qubits) + list(gate.controls), full)
        return apply_diagonal(state, gate.qubits, payload)
    if gate.controls:
        return apply_controlled(state, gate.controls, gate.qubits, payload)
    return apply_unitary(state, gate.qubits, payload)


def apply_fragment(state: StateVector, fragment) -> StateVector:
    for gate in fragment:
        apply_gate(state, gate)
    return state


def _adjoint_gate(gate: Gate):
    if gate.name in ("inverse", "hadamard", "swap", "x"):
        return [gate]
    if gate.name == "mult":
        inv = Gate("inverse", gate.qubits[:3], gate.controls)
        return [inv, gate, inv]
    if gate.name == "fourier":
        return [Gate("fourier_adj", gate.qubits, gate.controls)]
    if gate.name == "fourier_adj":
        return [Gate("fourier", gate.qubits, gate.controls)]
    if gate.name in ("phase", "trace_phase"):
        return [Gate(gate.name, gate.qubits, gate.controls, (-gate.params[0],))]
    if gate.name == "kinetic_phase":
        dt, coupling = gate.params
        return [Gate(gate.name, gate.qubits, gate.controls, (-dt, coupling))]
    raise ValueError(f"unknown gate {gate.name!r}")


def adjoint_fragment(fragment) -> CircuitFragment:
    out = CircuitFragment()
    for gate in reversed(list(fragment)):
        out.extend(_adjoint_gate(gate))
    return out


def fragment_matrix(fragment, n_qubits: int) -> np.ndarray:
    """Dense matrix of a fragment on a small qubit count (tests only)."""
    from .statevector import RegisterLayout

    layout = RegisterLayout({"all": tuple(range(n_qubits))})
    dim = 1 << n_qubits
    cols = []
    for b in range(dim):
        st = StateVector.computational_basis(layout, b)
        apply_fragment(st, fragment)
        cols.append(st.amps)
    return np.stack(cols, axis=1)


def gate_inverse(link_qubits) -> CircuitFragment:
    """|g> -> |g^{-1}> on one 3-qubit link register."""
    return CircuitFragment([Gate("inverse", tuple(link_qubits))])


def gate_mult(src_qubits, dst_qubits) -> CircuitFragment:
    """|g>|h> -> |g>|gh>: left-multiply dst by src."""
    src, dst = tuple(src_qubits), tuple(dst_qubits)
    if set(src) & set(dst):
        raise ValueError("mult requires distinct registers")
    return CircuitFragment([Gate("mult", src + dst)])


def gate_trace_phase(link_qubits, theta: float) -> CircuitFragment:
    """Phase e^{2i theta} on |e>, e^{-2i theta} on |r^2>, identity elsewhere."""
    return CircuitFragment([Gate("trace_phase", tuple(link_qubits), (), (float(theta),))])


def gate_fourier(link_qubits, adjoint: bool = False) -> CircuitFragment:
    name = "fourier_adj" if adjoint else "fourier"
    return CircuitFragment([Gate(name, tuple(link_qubits))])


def gate_kinetic_phase(link_qubits, dt: float, coupling: float) -> CircuitFragment:
    """Irrep-basis diagonal e^{+i dt ln(lambda_j)} per irrep slot."""
    return CircuitFragment([Gate("kinetic_phase", tuple(link_qubits), (), (float(dt), float(coupling)))])


def kinetic_step(link_qubits, dt: float, coupling: float) -> CircuitFragment:
    """Single-link e^{-i H_k dt} as Fourier-conjugated diagonal."""
    return (
        gate_fourier(link_qubits)
        + gate_kinetic_phase(link_qubits, dt, coupling)
        + gate_fourier(link_qubits, adjoint=True)
    )


def _plaquette_roles(plaquette) -> tuple:
    """Extract (repeated, central, negated) link roles from a face loop.

    The supported shape is [(c,+1),(f,+1),(t,-1),(f,-1)]: link f traversed
    forward then backward, c forward once, t backward once, giving the
    group value f^{-1} t^{-1} f c on the central register.
    """
    links = [l for l, _ in plaquette]
    exps = dict()
    counts = {}
    for l, e in plaquette:
        counts[l] = counts.get(l, 0) + 1
        exps.setdefault(l, []).append(e)
    twice = [l for l, c in counts.items() if c == 2]
    if len(plaquette) != 4 or len(twice) != 1 or sorted(exps[twice[0]]) != [-1, 1]:
        raise ValueError("unsupported plaquette shape")
    f = twice[0]
    c = [l for l, e in plaquette if l != f and e == 1]
    t = [l for l, e in plaquette if l != f and e == -1]
    if len(c) != 1 or len(t) != 1 or plaquette[0] != (c[0], 1):
        raise ValueError("unsupported plaquette shape")
    return f, c[0], t[0]


def plaquette_basis_change(layout, lattice, p_index: int):
    """Return (S, S_adjoint, central link index) for one plaquette.

    After S the central register holds the plaquette's group value; the
    other two registers are restored to their original contents.  Built
    from inversion and left-multiplication gates only.
    """
    if not 0 <= p_index < len(lattice.plaquettes):
        raise ValueError(f"no plaquette {p_index}")
    f, c, t = _plaquette_roles(lattice.plaquettes[p_index])
    fq, cq, tq = (layout[f"link{l}"] for l in (f, c, t))
    s = (
        gate_mult(fq, cq)
        + gate_inverse(fq)
        + gate_inverse(tq)
        + gate_mult(tq, cq)
        + gate_mult(fq, cq)
        + gate_inverse(fq)
        + gate_inverse(tq)
    )
    return s, adjoint_fragment(s), c


def evolve_potential_step(layout, lattice, dt: float, inv_g2: float) -> CircuitFragment:
    """e^{-i H_V dt}: per plaquette, S then a trace phase then S adjoint.

    The trace-phase angle +dt/g^2 makes the composite equal the matrix
    exponential of the diagonal magnetic Hamiltonian, which carries a
    -1/g^2 prefactor.
    """
    out = CircuitFragment()
    for p in range(len(lattice.plaquettes)):
        s, s_adj, c = plaquette_basis_change(layout, lattice, p)
        out.extend(s)
        out.extend(gate_trace_phase(layout[f"link{c}"], dt * inv_g2))
        out.extend(s_adj)
    return out


def trotter_unit(layout, lattice, dt: float, inv_g2: float) -> CircuitFragment:
    """One symmetric step: half kinetic, full potential, half kinetic."""
    half = CircuitFragment()
    for l in range(lattice.n_links):
        half.extend(kinetic_step(layout[f"link{l}"], dt / 2.0, inv_g2))
    return half + evolve_potential_step(layout, lattice, dt, inv_g2) + half


def trotter_evolution(layout, lattice, t: float, n_steps: int, inv_g2: float) -> CircuitFragment:
    """(K(dt/2) V(dt) K(dt/2))^N with dt = t/N."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    unit = trotter_unit(layout, lattice, t / n_steps, inv_g2)
    out = CircuitFragment()
    for _ in range(n_steps):
        out.extend(unit)
    return out


@dataclass(frozen=True)
class QpeGrid:
    """Uniform energy grid estimated by phase estimation.

    Site j holds energy e_min + spacing*j; the all-zeros register state
    reads e_min and the all-ones state reads e_max.  Site j corresponds
    to phase j/2^q, so e_max sits at phase (2^q-1)/2^q with no
    wraparound.
    """

    q_e: int
    e_min: float = -13.0
    e_max: float = 0.0

    def __post_init__(self):
        if not 1 <= self.q_e <= 20:
            raise ValueError("energy register size out of range")
        if not self.e_min < self.e_max:
            raise ValueError("empty energy range")

    @property
    def size(self) -> int:
        return 1 << self.q_e

    @property
    def spacing(self) -> float:
        return (self.e_max - self.e_min) / (self.size - 1)

    @property
    def energies(self) -> np.ndarray:
        return self.e_min + self.spacing * np.arange(self.size)

    def energy_of(self, j: int) -> float:
        return self.e_min + self.spacing * j

    @property
    def phase_scale(self) -> float:
        """Phase fraction advanced per unit of energy above e_min."""
        return (self.size - 1) / (self.size * (self.e_max - self.e_min))

    @property
    def unit_time(self) -> float:
        """Evolution time whose phase kickback realizes the site map.

        Negative: e^{-iHt} must advance phase with increasing energy.
        """
        return -2.0 * math.pi * self.phase_scale

    @property
    def fixup_angle(self) -> float:
        """Extra phase per controlled unit subtracting the e_min offset."""
        return -2.0 * math.pi * self.phase_scale * self.e_min

    def phase_fraction(self, energy) -> np.ndarray:
        return (np.asarray(energy) - self.e_min) * self.phase_scale


@dataclass(frozen=True)
class TrotterParams:
    """Step count per evolution unit; base_time None defers to the grid."""

    n_steps: int = 10
    base_time: float = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("need at least one step")

    def unit_time(self, grid: QpeGrid) -> float:
        return grid.unit_time if self.base_time is None else self.base_time


def qpe_coefficient(e_k: float, j, grid: QpeGrid) -> np.ndarray:
    """Probability of grid outcome j for an eigenstate of energy e_k.

    Dirichlet-kernel form; the on-site removable singularity evaluates
    to 1 and the probabilities sum to 1 over the periodic grid.
    """
    d = e_k - grid.energy_of(np.asarray(j, dtype=float))
    u = 2.0 * math.pi * d / (grid.spacing * grid.size)
    return diric(u, grid.size) ** 2


def qpe_coefficient_table(energies, grid: QpeGrid) -> np.ndarray:
    """|c|^2 for each (grid site j, level k): shape (2^q, len(energies))."""
    ek = np.asarray(energies, dtype=float)
    d = ek[None, :] - grid.energies[:, None]
    u = 2.0 * math.pi * d / (grid.spacing * grid.size)
    return diric(u, grid.size) ** 2


def inverse_qft_fragment(qubits) -> CircuitFragment:
    """Gate-decomposed inverse Fourier transform, bit j of the value on
    qubits[j]."""
    qs = list(qubits)
    n = len(qs)
    out = CircuitFragment()
    for a in range(n // 2):
        out.append(Gate("swap", (qs[a], qs[n - 1 - a])))
    for m in range(n):
        for k in range(m):
            out.append(Gate("phase", (qs[m],), (qs[k],), (-math.pi / (1 << (m - k)),)))
        out.append(Gate("hadamard", (qs[m],)))
    return out


def controlled_trotter_unit(layout, lattice, dt: float, inv_g2: float, control: int) -> CircuitFragment:
    """One Trotter unit with every diagonal factor conditioned on a control.

    Basis-change gates stay unconditioned: conjugating a controlled
    diagonal reproduces the controlled composite exactly.
    """
    out = CircuitFragment()
    for gate in trotter_unit(layout, lattice, dt, inv_g2):
        if gate.name in ("trace_phase", "kinetic_phase"):
            out.append(Gate(gate.name, gate.qubits, gate.controls + (control,), gate.params))
        else:
            out.append(gate)
    return out


def apply_controlled_system_unitary(state: StateVector, control: int, matrix: np.ndarray) -> StateVector:
    """Apply a dense 4096-dim operator to the link registers when the
    control qubit is 1.

    Requires the links on qubits 0..11; rows of the reshaped state are
    selected by the control bit.
    """
    if control < 12:
        raise ValueError("control must live above the link registers")
    psi = state.amps.reshape(-1, 4096)
    rows = np.arange(psi.shape[0])
    mask = (rows >> (control - 12)) & 1 == 1
    psi[mask] = psi[mask] @ matrix.T
    state.amps = np.ascontiguousarray(psi.reshape(-1))
    return state


def qpe_unitary(state: StateVector, layout, grid: QpeGrid, *, lattice=None,
                inv_g2: float = None, trotter: TrotterParams = None,
                unit_matrix: np.ndarray = None) -> StateVector:
    """The phase-estimation unitary: Hadamards, controlled unit powers
    with per-control offset phases, then the inverse Fourier transform.

    Power 2^m is realized as 2^m sequential unit applications.  Supply
    either lattice/inv_g2/trotter for the gate-level Trotter unit or a
    precomputed dense unit_matrix for exact evolution.
    """
    energy = layout["energy"]
    if len(energy) != grid.q_e:
        raise ValueError("energy register size does not match grid")
    for q in energy:
        apply_gate(state, Gate("hadamard", (q,)))
    if unit_matrix is None:
        trotter = trotter or TrotterParams()
        t0 = trotter.unit_time(grid)
        for m, control in enumerate(energy):
            unit = controlled_trotter_unit(layout, lattice, t0 / trotter.n_steps, inv_g2, control)
            repeated = CircuitFragment()
            for _ in range(trotter.n_steps):
                repeated.extend(unit)
            for _ in range(1 << m):
                apply_fragment(state, repeated)
            apply_gate(state, Gate("phase", (control,), (), ((1 << m) * grid.fixup_angle,)))
    else:
        for m, control in enumerate(energy):
            for _ in range(1 << m):
                apply_controlled_system_unitary(state, control, unit_matrix)
            apply_gate(state, Gate("phase", (control,), (), ((1 << m) * grid.fixup_angle,)))
    apply_fragment(state, inverse_qft_fragment(energy))
    return state


def qpe_apply(state: StateVector, layout, grid: QpeGrid, rng, **kwargs) -> tuple:
    """Full estimation round: unitary, measure the energy register,
    reset it to zero.  Returns (grid index, state)."""
    qpe_unitary(state, layout, grid, **kwargs)
    j, _ = measure(state, layout["energy"], rng)
    reset_qubits(state, layout["energy"], j)
    return j, state
