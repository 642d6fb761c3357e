"""Dense statevector emulator with named qubit registers.

Amplitudes are stored as a single complex128 vector of length 2^n; bit q of
the flat basis index is qubit q.  Gates are dense unitaries over a small
list of target qubits, where bit j of the gate's own matrix index belongs
to targets[j].  Operations mutate the state in place and also return it,
so calls can be chained.

Measurements consume exactly one uniform variate from the supplied stream
per call, which keeps trajectories reproducible bit for bit under a fixed
seed regardless of batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNITARITY_TOL = 1e-10
MAX_DENSE_TARGETS = 6

_DUMP_MAGIC = b"D4QMSSV1"


class RngStream:
    """Deterministic random stream keyed by a seed and an integer path.

    Wraps numpy's Philox-backed default generator seeded through a
    SeedSequence with a spawn key, so independent substreams can be derived
    reproducibly with `spawn`.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.generator = np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=self.key)
        )

    def spawn(self, *key) -> "RngStream":
        """Child stream at a deeper key; independent of the parent draws."""
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return float(self.generator.random())

    def uniform_array(self, n: int) -> np.ndarray:
        return self.generator.random(n)

    def choice(self, n: int, p=None) -> int:
        """Draw an index with one uniform variate against cumulative weights."""
        u = self.uniform()
        if p is None:
            return min(int(u * n), n - 1)
        edges = np.cumsum(p)
        edges = edges / edges[-1]
        return int(np.searchsorted(edges, u, side="right"))


class RegisterLayout:
    """Named groups of qubit indices inside one statevector."""

    def __init__(self, registers: dict):
        self.registers = {name: tuple(int(q) for q in qs) for name, qs in registers.items()}
        all_qubits = [q for qs in self.registers.values() for q in qs]
        if len(set(all_qubits)) != len(all_qubits):
            raise ValueError("registers overlap")
        if sorted(all_qubits) != list(range(len(all_qubits))):
            raise ValueError("register qubits must cover 0..n-1 without gaps")
        self.n_qubits = len(all_qubits)

    def __getitem__(self, name: str) -> tuple:
        return self.registers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.registers

    @property
    def dim(self) -> int:
        return 1 << self.n_qubits

    @staticmethod
    def standard(n_links: int = 4, q_e: int = 0, acceptance: bool = False, auxiliary: bool = False) -> "RegisterLayout":
        """Layout used by the sampler: link registers first, then bookkeeping.

        Link l occupies qubits 3l..3l+2 (least significant bit first), the
        energy register follows, then the acceptance and auxiliary qubits.
        """
        regs = {}
        q = 0
        for l in range(n_links):
            regs[f"link{l}"] = (q, q + 1, q + 2)
            q += 3
        if q_e:
            regs["energy"] = tuple(range(q, q + q_e))
            q += q_e
        if acceptance:
            regs["acceptance"] = (q,)
            q += 1
        if auxiliary:
            regs["auxiliary"] = (q,)
            q += 1
        return RegisterLayout(regs)


class StateVector:
    """A normalized pure state over a register layout."""

    def __init__(self, layout: RegisterLayout, amplitudes: np.ndarray):
        if amplitudes.shape != (layout.dim,):
            raise ValueError("amplitude length does not match layout")
        self.layout = layout
        self.amps = np.ascontiguousarray(amplitudes, dtype=np.complex128)

    @classmethod
    def computational_basis(cls, layout: RegisterLayout, index: int = 0) -> "StateVector":
        amps = np.zeros(layout.dim, dtype=np.complex128)
        amps[index] = 1.0
        return cls(layout, amps)

    def copy(self) -> "StateVector":
        return StateVector(self.layout, self.amps.copy())

    def norm(self) -> float:
        return float(np.linalg.norm(self.amps))

    def normalize(self) -> "StateVector":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize the zero vector")
        self.amps /= n
        return self

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amps) ** 2

    def register_value_index(self, name: str) -> np.ndarray:
        """Per-basis-state integer held by a register, over the full space."""
        qs = self.layout[name]
        idx = np.arange(self.layout.dim)
        out = np.zeros(self.layout.dim, dtype=np.int64)
        for j, q in enumerate(qs):
            out |= ((idx >> q) & 1) << j
        return out


def _subindex(n_qubits: int, qubits) -> np.ndarray:
    idx = np.arange(1 << n_qubits)
    out = np.zeros(1 << n_qubits, dtype=np.int64)
    for j, q in enumerate(qubits):
        out |= ((idx >> q) & 1) << j
    return out


def _check_targets(state: StateVector, qubits) -> None:
    n = state.layout.n_qubits
    if len(set(qubits)) != len(qubits):
        raise ValueError("duplicate target qubits")
    for q in qubits:
        if not 0 <= q < n:
            raise ValueError(f"qubit {q} out of range")


def _check_unitary(matrix: np.ndarray, k: int) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.complex128)
    if matrix.shape != (1 << k, 1 << k):
        raise ValueError("matrix shape does not match target count")
    defect = matrix.conj().T @ matrix - np.eye(1 << k)
    if np.abs(defect).max() > UNITARITY_TOL:
        raise ValueError("matrix is not unitary within tolerance")
    return matrix


def _apply_matrix_view(view: np.ndarray, rel_axes, matrix: np.ndarray) -> np.ndarray:
    """Apply a gate to chosen axes of a (2,)*m tensor view, returning a copy.

    rel_axes lists the axis of each gate bit, gate bit 0 last.
    """
    m = view.ndim
    k = len(rel_axes)
    ordered = [rel_axes[k - 1 - j] for j in range(k)]  # highest gate bit first
    rest = [ax for ax in range(m) if ax not in ordered]
    perm = rest + ordered
    moved = np.transpose(view, perm).reshape(-1, 1 << k)
    out = moved @ matrix.T
    out = out.reshape([2] * m)
    return np.transpose(out, np.argsort(perm))


def apply_unitary(state: StateVector, qubits, matrix: np.ndarray) -> StateVector:
    """Apply a dense unitary to the listed target qubits.

    Gate matrix bit j corresponds to qubits[j].  Dense application is
    limited to six targets; larger operators must go through structured
    routines.
    """
    qubits = list(qubits)
    _check_targets(state, qubits)
    if len(qubits) > MAX_DENSE_TARGETS:
        raise ValueError("too many targets for dense application")
    matrix = _check_unitary(matrix, len(qubits))
    n = state.layout.n_qubits
    psi = state.amps.reshape((2,) * n)
    rel = [n - 1 - q for q in qubits]
    out = _apply_matrix_view(psi, rel, matrix)
    state.amps = np.ascontiguousarray(out.reshape(-1))
    return state


def apply_controlled(state: StateVector, controls, qubits, matrix: np.ndarray, control_values=None) -> StateVector:
    """Apply a unitary on targets conditioned on control qubit values.

    Control values default to all ones.  Controls and targets must not
    overlap.
    """
    controls = list(controls)
    qubits = list(qubits)
    _check_targets(state, controls + qubits)
    if len(qubits) > MAX_DENSE_TARGETS:
        raise ValueError("too many targets for dense application")
    matrix = _check_unitary(matrix, len(qubits))
    if control_values is None:
        control_values = [1] * len(controls)
    if len(control_values) != len(controls):
        raise ValueError("control value count mismatch")
    n = state.layout.n_qubits
    psi = state.amps.reshape((2,) * n)
    indexer = [slice(None)] * n
    for q, v in zip(controls, control_values):
        indexer[n - 1 - q] = int(v)
    sub = psi[tuple(indexer)]
    ctrl_axes = sorted(n - 1 - q for q in controls)
    rel = []
    for q in qubits:
        ax = n - 1 - q
        rel.append(ax - sum(1 for c in ctrl_axes if c < ax))
    psi[tuple(indexer)] = _apply_matrix_view(sub, rel, matrix)
    state.amps = np.ascontiguousarray(psi.reshape(-1))
    return state


def apply_diagonal(state: StateVector, qubits, phases: np.ndarray) -> StateVector:
    """Multiply amplitudes by a diagonal unitary over a qubit subset.

    phases has one entry per subset value (bit j of the value is
    qubits[j]); every entry must have unit modulus.
    """
    qubits = list(qubits)
    _check_targets(state, qubits)
    phases = np.asarray(phases, dtype=np.complex128)
    if phases.shape != (1 << len(qubits),):
        raise ValueError("phase table size mismatch")
    if np.abs(np.abs(phases) - 1.0).max() > 1e-12:
        raise ValueError("diagonal is not unitary")
    sub = _subindex(state.layout.n_qubits, qubits)
    state.amps *= phases[sub]
    return state


def measure(state: StateVector, qubits, rng: RngStream) -> tuple:
    """Projective measurement of a qubit subset in the computational basis.

    Returns (outcome, state); the outcome integer packs qubits[j] at bit j.
    The state collapses and is renormalized.  A single uniform variate
    decides the outcome.
    """
    qubits = list(qubits)
    _check_targets(state, qubits)
    sub = _subindex(state.layout.n_qubits, qubits)
    weights = np.abs(state.amps) ** 2
    probs = np.bincount(sub, weights=weights, minlength=1 << len(qubits))
    total = probs.sum()
    if total <= 0:
        raise ValueError("state has zero norm")
    edges = np.cumsum(probs) / total
    u = rng.uniform()
    outcome = int(np.searchsorted(edges, u, side="right"))
    outcome = min(outcome, len(probs) - 1)
    if probs[outcome] <= 0:
        outcome = int(np.argmax(probs))
    state.amps[sub != outcome] = 0.0
    state.amps /= np.sqrt(probs[outcome])
    return outcome, state


def measure_predicate(state: StateVector, qubits, indicator, rng: RngStream) -> tuple:
    """Two-outcome projective measurement of a predicate on a qubit subset.

    indicator[v] is the truth value of the predicate for subset value v.
    Returns (outcome in {0,1}, state); collapses onto the matching support
    using one uniform variate, with the same edge convention as measure().
    """
    qubits = list(qubits)
    _check_targets(state, qubits)
    indicator = np.asarray(indicator, dtype=bool)
    if indicator.shape != (1 << len(qubits),):
        raise ValueError("indicator size mismatch")
    sub = _subindex(state.layout.n_qubits, qubits)
    hit = indicator[sub]
    weights = np.abs(state.amps) ** 2
    p1 = float(weights[hit].sum())
    p0 = float(weights.sum()) - p1
    edges = np.cumsum([p0, p1]) / (p0 + p1)
    outcome = int(np.searchsorted(edges, rng.uniform(), side="right"))
    outcome = min(outcome, 1)
    keep = hit if outcome == 1 else ~hit
    mass = p1 if outcome == 1 else p0
    if mass <= 0:
        outcome = 1 - outcome
        keep = ~keep
        mass = p0 + p1 - mass
    state.amps[~keep] = 0.0
    state.amps /= np.sqrt(mass)
    return outcome, state


def register_probabilities(state: StateVector, qubits) -> np.ndarray:
    """Marginal distribution over a qubit subset without collapsing."""
    qubits = list(qubits)
    _check_targets(state, qubits)
    sub = _subindex(state.layout.n_qubits, qubits)
    weights = np.abs(state.amps) ** 2
    return np.bincount(sub, weights=weights, minlength=1 << len(qubits))


def expectation_diagonal(state: StateVector, qubits, values: np.ndarray) -> float:
    """Expectation of a real diagonal observable over a qubit subset."""
    qubits = list(qubits)
    _check_targets(state, qubits)
    values = np.asarray(values, dtype=float)
    if values.shape != (1 << len(qubits),):
        raise ValueError("value table size mismatch")
    sub = _subindex(state.layout.n_qubits, qubits)
    return float(values[sub] @ (np.abs(state.amps) ** 2))


def reset_qubits(state: StateVector, qubits, outcome: int) -> StateVector:
    """Classically flip qubits known to hold `outcome` back to zero."""
    qubits = list(qubits)
    flip = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.complex128)
    for j, q in enumerate(qubits):
        if (outcome >> j) & 1:
            apply_unitary(state, [q], flip)
    return state


def dump_state(state: StateVector, path) -> None:
    """Write amplitudes to a binary file.

    Format: 8-byte magic, little-endian uint32 qubit count, 4 zero bytes,
    then the amplitudes as little-endian float64 pairs (real, imaginary).
    """
    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC)
        f.write(np.uint32(state.layout.n_qubits).astype("<u4").tobytes())
        f.write(b"\x00" * 4)
        f.write(state.amps.astype("<c16").tobytes())


def load_state(path, layout: RegisterLayout) -> StateVector:
    """Read a dump written by dump_state; layout must match the qubit count."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _DUMP_MAGIC:
            raise ValueError("unrecognized dump header")
        n = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        f.read(4)
        if n != layout.n_qubits:
            raise ValueError("dump qubit count does not match layout")
        data = np.frombuffer(f.read(), dtype="<c16")
    if data.shape != (1 << n,):
        raise ValueError("dump payload truncated")
    return StateVector(layout, data.copy())
