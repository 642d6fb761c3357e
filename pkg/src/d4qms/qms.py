"""Gauge-invariant Quantum Metropolis Sampling.

The Markov chain alternates randomly chosen gauge-invariant moves with a
phase-estimation energy measurement and a Metropolis accept/reject oracle;
rejected steps run an iterative revert that searches for a state whose
measured grid energy falls back inside a tolerance window of the pre-move
energy.

Two interchangeable executors are provided.  `Chain`/`ChainPool` evolve
the 4096-dimensional link state in the eigenbasis of the evolution unit,
where the phase-estimation register and the acceptance qubit can be
tracked in closed form; this is fast enough for production runs.
`CircuitProtocolChain` drives the identical protocol gate by gate on the
full register file and consumes the same random variates in the same
order, so the two can be compared trajectory for trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import dihedral
from .gauge import GaugeModel, HamiltonianSpec
from .circuits import (
    CircuitFragment,
    Gate,
    QpeGrid,
    TrotterParams,
    _plaquette_roles,
    adjoint_fragment,
    apply_controlled_system_unitary,
    apply_fragment,
    apply_gate,
    controlled_trotter_unit,
    inverse_qft_fragment,
    plaquette_basis_change,
    qpe_unitary,
)
from .statevector import (
    RegisterLayout,
    RngStream,
    StateVector,
    apply_controlled,
    apply_diagonal,
    apply_unitary,
    measure,
    measure_predicate,
    reset_qubits,
)

# spawn-key namespaces so independent streams never collide
MOVESET_STREAM_KEY = 1
CHAIN_STREAM_KEY = 2
ANALYSIS_STREAM_KEY = 3


def draw_index(rng: RngStream, probs) -> int:
    """Draw an index from explicit weights with one uniform variate, using
    the same cumulative-edge convention as register measurement."""
    probs = np.asarray(probs, dtype=float)
    edges = np.cumsum(probs)
    edges = edges / edges[-1]
    idx = int(np.searchsorted(edges, rng.uniform(), side="right"))
    idx = min(idx, probs.size - 1)
    if probs[idx] <= 0:
        idx = int(np.argmax(probs))
    return idx


@dataclass(frozen=True)
class MoveSet:
    """Four moves R1, R1^dag, R2, R2^dag built from two random
    gauge-invariant generators.

    A1 is a real combination of fundamental-trace Wilson loops over the
    lattice's loop family (cycle basis plus decorated windings), diagonal
    in the link basis.  A2 is a real combination of per-link irrep
    projectors, block diagonal with one 8x8 factor per link.  Coefficients
    are uniform on [-1, 1] from a seeded stream, redrawn if the generators
    nearly commute.
    """

    seed: int
    theta1: float
    theta2: float
    loop_coeffs: np.ndarray        # (n_loops,) over lattice.loop_family()
    projector_coeffs: np.ndarray   # (n_links, 5)
    a1_diag: np.ndarray            # (dim,) real
    a2_blocks: np.ndarray          # (n_links, 8, 8) real symmetric
    r1_phases: np.ndarray          # (dim,) unit modulus
    r2_blocks: np.ndarray          # (n_links, 8, 8) unitary

    MOVE_NAMES = ("R1", "R1_adj", "R2", "R2_adj")

    def move_phases(self, move: int) -> np.ndarray:
        return self.r1_phases if move == 0 else self.r1_phases.conj()

    def move_blocks(self, move: int) -> np.ndarray:
        if move == 2:
            return self.r2_blocks
        return np.conj(np.transpose(self.r2_blocks, (0, 2, 1)))

    def is_diagonal_move(self, move: int) -> bool:
        return move in (0, 1)

    def adjoint_move(self, move: int) -> int:
        return move ^ 1


def build_moveset(seed: int, model: GaugeModel, theta1: float = 1.0, theta2: float = 1.0) -> MoveSet:
    stream = RngStream(seed, (MOVESET_STREAM_KEY,))
    lattice = model.lattice
    loops = lattice.loop_family()
    projectors = np.stack([dihedral.irrep_projector(j) for j in range(5)])
    probe = np.sin(1.0 + 0.37 * np.arange(model.dim)).astype(complex)  # fixed commutator probe
    for _ in range(16):
        r1 = 2.0 * stream.uniform_array(len(loops)) - 1.0
        r2 = 2.0 * stream.uniform_array(lattice.n_links * 5).reshape(lattice.n_links, 5) - 1.0
        a1 = np.zeros(model.dim)
        for coeff, cycle in zip(r1, loops):
            a1 += coeff * model.loop_re_trace(cycle)
        blocks = np.einsum("lj,jab->lab", r2, projectors)
        v2 = _apply_link_blocks(probe, blocks, accumulate=True)
        comm = a1 * v2 - _apply_link_blocks(a1 * probe, blocks, accumulate=True)
        if np.linalg.norm(comm) / np.linalg.norm(probe) > 1e-3:
            break
    else:
        raise RuntimeError("could not draw non-commuting generators")
    r2_blocks = np.stack([sla.expm(1j * theta2 * b) for b in blocks])
    return MoveSet(
        seed=seed,
        theta1=theta1,
        theta2=theta2,
        loop_coeffs=r1,
        projector_coeffs=r2,
        a1_diag=a1,
        a2_blocks=blocks,
        r1_phases=np.exp(1j * theta1 * a1),
        r2_blocks=r2_blocks,
    )


def _apply_link_blocks(psi: np.ndarray, blocks: np.ndarray, accumulate: bool = False) -> np.ndarray:
    """One 8x8 block per link acting on a 4096-vector or stack of columns.

    accumulate=True sums the four single-link actions (an operator sum);
    otherwise the per-link factors are composed.
    """
    n_links = blocks.shape[0]
    cols = psi.reshape((8,) * n_links + (-1,))
    if accumulate:
        out = np.zeros_like(cols)
        for l in range(n_links):
            axis = n_links - 1 - l
            out += np.moveaxis(np.tensordot(blocks[l], cols, axes=([1], [axis])), 0, axis)
        return out.reshape(psi.shape)
    for l in range(n_links):
        axis = n_links - 1 - l
        cols = np.moveaxis(np.tensordot(blocks[l], cols, axes=([1], [axis])), 0, axis)
    return cols.reshape(psi.shape)


@dataclass(frozen=True)
class ChainConfig:
    """Everything that determines a sampling run."""

    beta: float = 1e-7
    q_e: int = 3
    e_min: float = -13.0
    e_max: float = 0.0
    trotter_steps: int = 10
    evolution: str = "trotter"          # "trotter" | "exact"
    thermalization: int = 50
    rethermalization: int = 1
    m_tol: int | None = None            # None resolves to the default rule
    max_revert_iters: int = 100
    move_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    seed: int = 0
    chains: int = 1
    samples_per_chain: int = 100
    measure_plaquette: bool = False
    plaquette_index: int = 0
    inv_g2: float = 0.8
    chains_per_batch: int = 16
    gauge_check_every: int = 0          # 0 disables the diagnostic

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.m_tol is not None and self.m_tol < 0:
            raise ValueError("m_tol must be non-negative")
        if abs(sum(self.move_probs) - 1.0) > 1e-9:
            raise ValueError("move probabilities must sum to 1")
        if self.evolution not in ("trotter", "exact"):
            raise ValueError("evolution must be 'trotter' or 'exact'")
        if self.chains < 0 or self.samples_per_chain < 0:
            raise ValueError("negative work amounts")
        if self.max_revert_iters < 1:
            raise ValueError("max_revert_iters must be positive")

    @property
    def resolved_m_tol(self) -> int:
        if self.m_tol is not None:
            return self.m_tol
        return 3 if (self.beta >= 0.5 and self.q_e >= 5) else 0

    @property
    def grid(self) -> QpeGrid:
        return QpeGrid(self.q_e, self.e_min, self.e_max)

    @property
    def trotter(self) -> TrotterParams:
        return TrotterParams(self.trotter_steps)


@dataclass
class SampleRecord:
    chain_id: int
    step: int
    energy_index: int
    energy_value: float
    plaquette: float | None = None
    accepted: bool = True
    revert_iters: int = 0
    aborted: bool = False

    CSV_HEADER = "chain_id,step,energy_index,energy_value,plaquette,accepted,revert_iters,aborted"

    def to_csv_row(self) -> str:
        plaq = "" if self.plaquette is None else f"{self.plaquette:g}"
        return (
            f"{self.chain_id},{self.step},{self.energy_index},{self.energy_value:.12g},"
            f"{plaq},{int(self.accepted)},{self.revert_iters},{int(self.aborted)}"
        )


def _real_mul(q: np.ndarray, x: np.ndarray) -> np.ndarray:
    """q (real) @ x (complex) without promoting q to a complex copy."""
    return q @ np.ascontiguousarray(x.real) + 1j * (q @ np.ascontiguousarray(x.imag))


def _symmetric_unitary_eigensystem(u: np.ndarray) -> tuple:
    """Real orthogonal eigenvectors and eigenangles of a complex symmetric
    unitary.

    Real and imaginary parts of such a matrix are commuting real symmetric
    matrices, so one eigh plus a per-cluster refinement diagonalizes both
    simultaneously.  Clustering retries with coarser gaps if the residual
    check fails.
    """
    a = np.ascontiguousarray(u.real)
    b = np.ascontiguousarray(u.imag)
    alpha, q = np.linalg.eigh(a)
    n = alpha.size
    scale = max(1.0, float(np.abs(alpha).max()))
    res = np.inf
    for gap in (1e-9, 1e-7, 1e-5):
        qc = q.copy()
        beta = np.empty(n)
        edges = [0] + [i for i in range(1, n) if alpha[i] - alpha[i - 1] > gap * scale] + [n]
        for lo, hi in zip(edges[:-1], edges[1:]):
            blk = qc[:, lo:hi]
            bblk = blk.T @ (b @ blk)
            w, basis = np.linalg.eigh(0.5 * (bblk + bblk.T))
            qc[:, lo:hi] = blk @ basis
            beta[lo:hi] = w
        alpha_ref = np.einsum("ij,ij->j", qc, a @ qc)
        res = max(
            float(np.abs(a @ qc - qc * alpha_ref[None, :]).max()),
            float(np.abs(b @ qc - qc * beta[None, :]).max()),
        )
        if res < 1e-9:
            return np.ascontiguousarray(qc), np.arctan2(beta, alpha_ref)
    raise RuntimeError(f"simultaneous diagonalization failed (residual {res:.2e})")


class EngineContext:
    """Shared precomputation for every chain of a run.

    The evolution unit of one controlled power, offset phase included, is
    complex symmetric, so it factors as Q diag(e^{2 pi i f}) Q^T with Q
    real orthogonal.  In the coordinates x = Q^T psi everything the
    protocol does to the energy and acceptance registers has a closed
    form; only gauge moves and plaquette measurements need the round trip
    through the computational basis.
    """

    def __init__(self, config: ChainConfig, model: GaugeModel = None):
        self.config = config
        self.model = model if model is not None else GaugeModel(HamiltonianSpec(config.inv_g2))
        self.grid = config.grid
        self.moveset = build_moveset(config.seed, self.model)
        self._plaquette_cache = {}
        self._build_unit_eigensystem()
        self._build_tables()

    # ----- evolution unit ------------------------------------------------

    def _build_unit_eigensystem(self):
        grid, config = self.grid, self.config
        t0 = grid.unit_time
        if config.evolution == "exact":
            energies, vectors = np.linalg.eigh(self.model.hamiltonian_matrix)
            self.q_basis = np.ascontiguousarray(vectors)
            unit_angle = -energies * t0 + grid.fixup_angle
        else:
            dt = t0 / config.trotter_steps
            hk = dihedral.kinetic_link_hamiltonian(config.inv_g2)
            k1 = sla.expm(-1j * hk * dt / 2.0)
            kin = np.kron(np.kron(np.kron(k1, k1), k1), k1)
            pot = np.exp(-1j * self.model.magnetic_diagonal * dt)
            step = kin @ (pot[:, None] * kin)
            if np.abs(step - step.T).max() > 1e-12:
                raise RuntimeError("evolution step lost its symmetry")
            self.q_basis, step_angle = _symmetric_unitary_eigensystem(step)
            unit_angle = config.trotter_steps * step_angle + grid.fixup_angle
        self.unit_fraction = np.mod(unit_angle / (2.0 * math.pi), 1.0)

    def _build_tables(self):
        size = self.grid.size
        k = np.arange(size)
        self.phase_table = np.exp(2j * math.pi * np.outer(self.unit_fraction, k))  # (n, k)
        bits = (k[:, None] >> np.arange(self.grid.q_e)[None, :]) & 1
        signs = 1 - 2 * ((bits @ bits.T) & 1)
        self.hadamard_e = signs / math.sqrt(size)
        self.iqft_e = np.exp(-2j * math.pi * np.outer(k, k) / size) / math.sqrt(size)
        # row j = amplitude of energy outcome j per unit eigencomponent,
        # assembled from the same factors the revert tensor path uses
        self.d_table = self.iqft_e @ (self.phase_table.T / math.sqrt(size))
        self.d_abs2 = np.ascontiguousarray(np.abs(self.d_table) ** 2)
        de = self.grid.energies[None, :] - self.grid.energies[:, None]  # [i, j] = E_j - E_i
        self.accept_amp = np.sqrt(np.minimum(1.0, np.exp(-self.config.beta * de)))
        self.reject_amp = np.sqrt(np.maximum(0.0, 1.0 - self.accept_amp**2))

    # ----- basis transforms ------------------------------------------------

    def to_computational(self, x: np.ndarray) -> np.ndarray:
        return _real_mul(self.q_basis, x)

    def to_eigen(self, psi: np.ndarray) -> np.ndarray:
        return _real_mul(self.q_basis.T, psi)

    # ----- moves -----------------------------------------------------------

    def apply_move_computational(self, psi: np.ndarray, move: int) -> np.ndarray:
        ms = self.moveset
        if ms.is_diagonal_move(move):
            ph = ms.move_phases(move)
            return psi * (ph[:, None] if psi.ndim == 2 else ph)
        return _apply_link_blocks(psi, ms.move_blocks(move))

    # ----- plaquette machinery ----------------------------------------------

    def plaquette_tables(self, p_index: int) -> tuple:
        """Basis permutation of the loop-accumulating transform S, its
        inverse, and the masks read off the central register afterwards."""
        if p_index not in self._plaquette_cache:
            lattice = self.model.lattice
            plaquette = lattice.plaquettes[p_index]
            values = self.model.loop_values(plaquette)
            _, central, _ = _plaquette_roles(plaquette)
            idx = np.arange(self.model.dim, dtype=np.int64)
            digit = (idx >> (3 * central)) & 7
            sig = idx - (digit << (3 * central)) + (values << (3 * central))
            sig_inv = np.empty_like(sig)
            sig_inv[sig] = idx
            in_center = (digit == 0) | (digit == 2)          # e or r^2
            x1_bit = ((digit >> 1) & 1).astype(bool)
            self._plaquette_cache[p_index] = (sig, sig_inv, in_center, x1_bit, central)
        return self._plaquette_cache[p_index]

    # ----- diagnostics --------------------------------------------------------

    def gauge_residual_computational(self, psi: np.ndarray) -> float:
        return self.model.gauge_residual(psi)


class Chain:
    """One Markov chain in the eigenbasis representation."""

    def __init__(self, engine: EngineContext, chain_id: int):
        self.engine = engine
        self.config = engine.config
        self.chain_id = chain_id
        self.restarts = 0
        self.records = []
        self.sample_count = 0
        self.step_count = 0
        self.accepts = 0
        self.rejects = 0
        self.revert_iterations = 0
        self.aborts = 0
        self.max_gauge_residual = 0.0
        self._begin_life()

    def _begin_life(self):
        self.rng = RngStream(self.config.seed, (CHAIN_STREAM_KEY, self.chain_id, self.restarts))
        self.x = None
        self.e_idx = None
        self.therm_left = self.config.thermalization
        self.retherm_left = 0
        self.last_accepted = True
        self.last_revert_iters = 0
        self.pending_move = None

    @property
    def finished(self) -> bool:
        return self.sample_count >= self.config.samples_per_chain

    def needs_init(self) -> bool:
        return self.x is None

    def wants_sample(self) -> bool:
        return self.therm_left == 0 and self.retherm_left == 0

    def initialize(self):
        """Uniform superposition over all link configurations, projected by
        one phase-estimation round."""
        psi0 = np.full(self.engine.model.dim, 1.0 / 64.0, dtype=np.complex128)
        self.x = self.engine.to_eigen(psi0)
        self.e_idx = self._qpe_measure()

    def _qpe_measure(self) -> int:
        probs = self.engine.d_abs2 @ np.abs(self.x) ** 2
        j = draw_index(self.rng, probs)
        x = self.engine.d_table[j] * self.x
        self.x = x / np.linalg.norm(x)
        return j

    # ----- one Metropolis step, split around the batched move ---------------

    def begin_step(self) -> int:
        self.pending_move = draw_index(self.rng, self.config.move_probs)
        return self.pending_move

    def finish_step(self) -> bool:
        """Acceptance oracle and measurement or revert, after the move was
        applied to self.x.  Returns False when the chain aborted."""
        eng = self.engine
        i = self.e_idx
        mass = eng.d_abs2 @ np.abs(self.x) ** 2
        s = eng.accept_amp[i]
        c = eng.reject_amp[i]
        p_accept = float(mass @ s**2)
        self.step_count += 1
        outcome = draw_index(self.rng, [max(0.0, 1.0 - p_accept), max(0.0, p_accept)])
        if outcome == 1:
            j = draw_index(self.rng, mass * s**2)
            x = eng.d_table[j] * self.x
            self.x = x / np.linalg.norm(x)
            self.e_idx = j
            self.accepts += 1
            self.last_accepted = True
            self.last_revert_iters = 0
            return True
        self.rejects += 1
        self.last_accepted = False
        m = eng.d_table * self.x[None, :]
        t = np.transpose(np.stack([m * c[:, None], np.zeros_like(m)], axis=2), (1, 0, 2))
        t = t / np.linalg.norm(t)  # axes (eigencomponent, energy, acceptance)
        ok, iters = self._revert(t)
        self.last_revert_iters = iters
        self.revert_iterations += iters
        if ok:
            return True
        self.aborts += 1
        self.records.append(
            SampleRecord(
                self.chain_id,
                self.step_count,
                self.e_idx,
                self.engine.grid.energy_of(self.e_idx),
                None,
                False,
                iters,
                True,
            )
        )
        self.restarts += 1
        self._begin_life()
        return False

    # ----- revert -----------------------------------------------------------

    def _phi(self, t: np.ndarray, adjoint: bool = False) -> np.ndarray:
        """The phase-estimation unitary (or its adjoint) on the energy axis
        of the revert tensor."""
        eng = self.engine
        if not adjoint:
            t = np.einsum("ky,nya->nka", eng.hadamard_e, t)
            t = t * eng.phase_table[:, :, None]
            return np.einsum("jk,nka->nja", eng.iqft_e, t)
        t = np.einsum("kj,nja->nka", eng.iqft_e.conj().T, t)
        t = t * eng.phase_table.conj()[:, :, None]
        return np.einsum("yk,nka->nya", eng.hadamard_e, t)

    def _rotation(self, t: np.ndarray, adjoint: bool = False) -> np.ndarray:
        s = self.engine.accept_amp[self.e_idx][None, :]
        c = self.engine.reject_amp[self.e_idx][None, :]
        a0, a1 = t[:, :, 0], t[:, :, 1]
        if adjoint:
            return np.stack([c * a0 + s * a1, -s * a0 + c * a1], axis=2)
        return np.stack([c * a0 - s * a1, s * a0 + c * a1], axis=2)

    def _move_on_tensor(self, t: np.ndarray, move: int) -> np.ndarray:
        eng = self.engine
        flat = t.reshape(t.shape[0], -1)
        psi = eng.to_computational(flat)
        psi = eng.apply_move_computational(psi, move)
        return eng.to_eigen(psi).reshape(t.shape)

    def _revert(self, t: np.ndarray) -> tuple:
        eng = self.engine
        cfg = self.config
        size = eng.grid.size
        window = np.abs(np.arange(size) - self.e_idx) <= cfg.resolved_m_tol
        move = self.pending_move
        for k in range(1, cfg.max_revert_iters + 1):
            t = self._rotation(t, adjoint=True)
            t = self._phi(t, adjoint=True)
            t = self._move_on_tensor(t, eng.moveset.adjoint_move(move))
            t = self._phi(t)
            mass_j = np.einsum("nja,nja->j", t, t.conj()).real
            p_in = float(mass_j[window].sum())
            p_out = max(0.0, float(mass_j.sum()) - p_in)
            if draw_index(self.rng, [p_out, p_in]) == 1:
                t[:, ~window, :] = 0.0
                j_rev = draw_index(self.rng, np.einsum("nja,nja->j", t, t.conj()).real)
                col = t[:, j_rev, :]
                col = col / np.linalg.norm(col)
                a_out = draw_index(self.rng, np.einsum("na,na->a", col, col.conj()).real)
                x = col[:, a_out]
                self.x = x / np.linalg.norm(x)
                return True, k
            t[:, window, :] = 0.0
            t = t / np.linalg.norm(t)
            t = self._phi(t, adjoint=True)
            t = self._move_on_tensor(t, move)
            t = self._phi(t)
            t = self._rotation(t)
            a_out = draw_index(self.rng, np.einsum("nja,nja->a", t, t.conj()).real)
            keep = t[:, :, a_out]
            keep = keep / np.linalg.norm(keep)
            t = np.zeros_like(t)
            t[:, :, a_out] = keep
        return False, cfg.max_revert_iters

    # ----- gauge-invariant plaquette measurement ------------------------------

    def measure_plaquette(self, psi: np.ndarray) -> tuple:
        """Two-stage projective measurement in the S frame on a
        computational-basis state; returns (outcome, collapsed psi)."""
        eng = self.engine
        sig, sig_inv, in_center, x1_bit, _ = eng.plaquette_tables(self.config.plaquette_index)
        psi = psi[sig_inv]
        w = np.abs(psi) ** 2
        p1 = float(w[in_center].sum())
        p0 = max(0.0, float(w.sum()) - p1)
        m1 = draw_index(self.rng, [p0, p1])
        keep = in_center if m1 == 1 else ~in_center
        psi = np.where(keep, psi, 0.0)
        psi = psi / np.linalg.norm(psi)
        if m1 == 0:
            outcome = 0.0
        else:
            w = np.abs(psi) ** 2
            pb1 = float(w[x1_bit].sum())
            m2 = draw_index(self.rng, [max(0.0, 1.0 - pb1), pb1])
            keepb = x1_bit if m2 == 1 else ~x1_bit
            psi = np.where(keepb, psi, 0.0)
            psi = psi / np.linalg.norm(psi)
            outcome = -2.0 if m2 == 1 else 2.0
        return outcome, psi[sig]


class ChainPool:
    """Runs a group of chains with the heavy basis transforms batched.

    Chains advance one protocol action per tick; all chains crossing
    between the eigenbasis and the computational basis in the same tick
    share one pair of matrix products.  Group membership is fixed by the
    configuration, never by the worker layout, so a run is reproducible
    for any degree of parallelism.
    """

    def __init__(self, engine: EngineContext, chain_ids):
        self.engine = engine
        self.config = engine.config
        self.chains = [Chain(engine, cid) for cid in chain_ids]

    def run(self):
        active = [c for c in self.chains if not c.finished]
        while active:
            for c in active:
                if c.needs_init():
                    c.initialize()
            samplers = [c for c in active if c.wants_sample()]
            if samplers:
                self._sample_event(samplers)
            steppers = [c for c in active if not c.finished and not c.wants_sample()]
            if steppers:
                self._step_event(steppers)
            active = [c for c in self.chains if not c.finished]
        records = []
        for c in self.chains:
            records.extend(c.records)
        return records

    def _step_event(self, chains):
        eng = self.engine
        for c in chains:
            c.begin_step()
        stack = np.stack([c.x for c in chains], axis=1)
        psi = eng.to_computational(stack)
        for k, c in enumerate(chains):
            psi[:, k] = eng.apply_move_computational(psi[:, k], c.pending_move)
        stack = eng.to_eigen(psi)
        for k, c in enumerate(chains):
            c.x = stack[:, k]
            if c.finish_step():
                if c.therm_left > 0:
                    c.therm_left -= 1
                elif c.retherm_left > 0:
                    c.retherm_left -= 1

    def _sample_event(self, chains):
        eng = self.engine
        cfg = self.config
        psi = None
        if cfg.measure_plaquette or cfg.gauge_check_every:
            stack = np.stack([c.x for c in chains], axis=1)
            psi = eng.to_computational(stack)
        for k, c in enumerate(chains):
            record = SampleRecord(
                c.chain_id,
                c.step_count,
                c.e_idx,
                eng.grid.energy_of(c.e_idx),
                None,
                c.last_accepted,
                c.last_revert_iters,
                False,
            )
            if cfg.gauge_check_every and c.sample_count % cfg.gauge_check_every == 0:
                res = eng.gauge_residual_computational(np.ascontiguousarray(psi[:, k]))
                c.max_gauge_residual = max(c.max_gauge_residual, res)
            if cfg.measure_plaquette:
                outcome, col = c.measure_plaquette(np.ascontiguousarray(psi[:, k]))
                record.plaquette = outcome
                psi[:, k] = col
            c.records.append(record)
            c.sample_count += 1
        if cfg.measure_plaquette:
            stack = eng.to_eigen(psi)
            for k, c in enumerate(chains):
                c.x = stack[:, k]
                c.e_idx = c._qpe_measure()  # re-estimate energy after the disturbance
        for c in chains:
            c.retherm_left = cfg.rethermalization

    def stats(self) -> dict:
        def total(name):
            return sum(getattr(c, name) for c in self.chains)

        return {
            "steps": total("step_count"),
            "accepts": total("accepts"),
            "rejects": total("rejects"),
            "revert_iterations": total("revert_iterations"),
            "aborts": total("aborts"),
            "samples": total("sample_count"),
            "max_gauge_residual": max((c.max_gauge_residual for c in self.chains), default=0.0),
        }


def batch_groups(config: ChainConfig):
    """The fixed partition of chain ids into lockstep groups."""
    ids = list(range(config.chains))
    group = max(1, config.chains_per_batch)
    return [ids[lo : lo + group] for lo in range(0, len(ids), group)]


def merge_stats(parts) -> dict:
    out = {}
    for part in parts:
        for key, val in part.items():
            if key == "max_gauge_residual":
                out[key] = max(out.get(key, 0.0), val)
            else:
                out[key] = out.get(key, 0) + val
    return out


def run_chains(config: ChainConfig, engine: EngineContext = None, groups=None):
    """Run every batch group sequentially; returns (records, stats)."""
    engine = engine or EngineContext(config)
    if groups is None:
        groups = batch_groups(config)
    records = []
    parts = []
    for ids in groups:
        pool = ChainPool(engine, ids)
        records.extend(pool.run())
        parts.append(pool.stats())
    return records, merge_stats(parts)


def gauge_residual(state: StateVector, model: GaugeModel) -> float:
    """1 - <psi|P|psi> for the group-average projector, for a full register
    file whose link registers sit on qubits 0..11."""
    gathers = model.gauge_gathers
    psi = state.amps.reshape(-1, model.dim)
    acc = 0.0
    for a in range(gathers.shape[0]):
        acc += float(np.real(np.einsum("rk,rk->", psi.conj(), psi[:, gathers[a]])))
    return 1.0 - acc / gathers.shape[0]


class CircuitProtocolChain:
    """Gate-level reference executor on the full register file.

    Consumes random variates in exactly the same order as `Chain`, so a
    matched seed yields the identical record stream; exists to validate
    the eigenbasis engine against the explicit circuits.
    """

    def __init__(self, config: ChainConfig, chain_id: int = 0, model: GaugeModel = None,
                 unit_matrix: np.ndarray = None):
        self.config = config
        self.model = model if model is not None else GaugeModel(HamiltonianSpec(config.inv_g2))
        self.grid = config.grid
        self.layout = RegisterLayout.standard(4, config.q_e, acceptance=True, auxiliary=True)
        self.moveset = build_moveset(config.seed, self.model)
        self.chain_id = chain_id
        self.restarts = 0
        if config.evolution == "exact" and unit_matrix is None:
            energies, vectors = np.linalg.eigh(self.model.hamiltonian_matrix)
            unit_matrix = (vectors * np.exp(-1j * energies * self.grid.unit_time)) @ vectors.T
        self.unit_matrix = unit_matrix
        self.records = []
        self.sample_count = 0
        self.step_count = 0
        self._begin_life()

    def _begin_life(self):
        self.rng = RngStream(self.config.seed, (CHAIN_STREAM_KEY, self.chain_id, self.restarts))
        self.state = StateVector.computational_basis(self.layout, 0)
        for q in range(12):
            apply_gate(self.state, Gate("hadamard", (q,)))
        self._qpe_measure_reset()
        self.therm_left = self.config.thermalization
        self.retherm_left = 0
        self.last_accepted = True
        self.last_revert_iters = 0

    # ----- protocol pieces ----------------------------------------------------

    def _qpe_kwargs(self) -> dict:
        if self.config.evolution == "exact":
            return {"unit_matrix": self.unit_matrix}
        return {
            "lattice": self.model.lattice,
            "inv_g2": self.config.inv_g2,
            "trotter": self.config.trotter,
        }

    def _qpe_unitary(self, adjoint: bool = False):
        if not adjoint:
            qpe_unitary(self.state, self.layout, self.grid, **self._qpe_kwargs())
            return
        energy = self.layout["energy"]
        apply_fragment(self.state, adjoint_fragment(inverse_qft_fragment(energy)))
        # the controlled powers commute, so the forward control order is fine
        if self.config.evolution == "exact":
            adj = self.unit_matrix.conj().T
            for m, control in enumerate(energy):
                apply_gate(self.state, Gate("phase", (control,), (), (-(1 << m) * self.grid.fixup_angle,)))
                for _ in range(1 << m):
                    apply_controlled_system_unitary(self.state, control, adj)
        else:
            trotter = self.config.trotter
            dt = trotter.unit_time(self.grid) / trotter.n_steps
            for m, control in enumerate(energy):
                apply_gate(self.state, Gate("phase", (control,), (), (-(1 << m) * self.grid.fixup_angle,)))
                unit = controlled_trotter_unit(self.layout, self.model.lattice, dt, self.config.inv_g2, control)
                repeated = CircuitFragment()
                for _ in range(trotter.n_steps):
                    repeated.extend(unit)
                adj = adjoint_fragment(repeated)
                for _ in range(1 << m):
                    apply_fragment(self.state, adj)
        for q in energy:
            apply_gate(self.state, Gate("hadamard", (q,)))

    def _qpe_measure_reset(self) -> int:
        self._qpe_unitary()
        j, _ = measure(self.state, self.layout["energy"], self.rng)
        reset_qubits(self.state, self.layout["energy"], j)
        self.e_idx = j
        return j

    def _apply_move(self, move: int):
        ms = self.moveset
        if ms.is_diagonal_move(move):
            apply_diagonal(self.state, tuple(range(12)), ms.move_phases(move))
        else:
            blocks = ms.move_blocks(move)
            for l in range(self.model.lattice.n_links):
                apply_unitary(self.state, self.layout[f"link{l}"], blocks[l])

    def _acceptance_rotation(self, adjoint: bool = False):
        energy = self.layout["energy"]
        acc = self.layout["acceptance"]
        e_i = self.grid.energy_of(self.e_idx)
        s_all = np.sqrt(np.minimum(1.0, np.exp(-self.config.beta * (self.grid.energies - e_i))))
        c_all = np.sqrt(np.maximum(0.0, 1.0 - s_all**2))
        for j in range(self.grid.size):
            rot = np.array([[c_all[j], -s_all[j]], [s_all[j], c_all[j]]])
            if adjoint:
                rot = rot.T
            values = [(j >> m) & 1 for m in range(self.grid.q_e)]
            apply_controlled(self.state, energy, acc, rot, control_values=values)

    # ----- one Metropolis step --------------------------------------------------

    def metropolis_step(self) -> bool:
        move = draw_index(self.rng, self.config.move_probs)
        self._apply_move(move)
        self._qpe_unitary()
        self._acceptance_rotation()
        acc = self.layout["acceptance"]
        self.step_count += 1
        a, _ = measure(self.state, acc, self.rng)
        if a == 1:
            j, _ = measure(self.state, self.layout["energy"], self.rng)
            reset_qubits(self.state, self.layout["energy"], j)
            reset_qubits(self.state, acc, 1)
            self.e_idx = j
            self.last_accepted = True
            self.last_revert_iters = 0
            return True
        self.last_accepted = False
        ok, iters = self._revert(move)
        self.last_revert_iters = iters
        if ok:
            return True
        self.records.append(
            SampleRecord(self.chain_id, self.step_count, self.e_idx,
                         self.grid.energy_of(self.e_idx), None, False, iters, True)
        )
        self.restarts += 1
        self._begin_life()
        return False

    def _revert(self, move: int) -> tuple:
        cfg = self.config
        energy = self.layout["energy"]
        acc = self.layout["acceptance"]
        size = self.grid.size
        window = np.abs(np.arange(size) - self.e_idx) <= cfg.resolved_m_tol
        for k in range(1, cfg.max_revert_iters + 1):
            self._acceptance_rotation(adjoint=True)
            self._qpe_unitary(adjoint=True)
            self._apply_move(self.moveset.adjoint_move(move))
            self._qpe_unitary()
            hit, _ = measure_predicate(self.state, energy, window, self.rng)
            if hit == 1:
                j_rev, _ = measure(self.state, energy, self.rng)
                a_out, _ = measure(self.state, acc, self.rng)
                reset_qubits(self.state, energy, j_rev)
                reset_qubits(self.state, acc, a_out)
                return True, k
            self._qpe_unitary(adjoint=True)
            self._apply_move(move)
            self._qpe_unitary()
            self._acceptance_rotation()
            measure(self.state, acc, self.rng)  # outcome folded into the next pass
        return False, cfg.max_revert_iters

    # ----- sampling ---------------------------------------------------------

    def measure_plaquette(self) -> float:
        s_frag, s_adj, central = plaquette_basis_change(
            self.layout, self.model.lattice, self.config.plaquette_index
        )
        aux = self.layout["auxiliary"]
        creg = self.layout[f"link{central}"]
        apply_fragment(self.state, s_frag)
        x_flip = np.array([[0.0, 1.0], [1.0, 0.0]])
        apply_controlled(self.state, [creg[0], creg[2]], aux, x_flip, control_values=[0, 0])
        m1, _ = measure(self.state, aux, self.rng)
        outcome = 0.0
        if m1 == 1:
            m2, _ = measure(self.state, [creg[1]], self.rng)
            outcome = -2.0 if m2 == 1 else 2.0
        reset_qubits(self.state, aux, m1)
        apply_fragment(self.state, s_adj)
        return outcome

    def sample_event(self):
        record = SampleRecord(self.chain_id, self.step_count, self.e_idx,
                              self.grid.energy_of(self.e_idx), None,
                              self.last_accepted, self.last_revert_iters, False)
        if self.config.measure_plaquette:
            record.plaquette = self.measure_plaquette()
            self._qpe_measure_reset()
        self.records.append(record)
        self.sample_count += 1
        self.retherm_left = self.config.rethermalization

    def run(self):
        while self.sample_count < self.config.samples_per_chain:
            if self.therm_left > 0 or self.retherm_left > 0:
                if self.metropolis_step():
                    if self.therm_left > 0:
                        self.therm_left -= 1
                    else:
                        self.retherm_left -= 1
                continue
            self.sample_event()
        return self.records

    def system_vector(self) -> np.ndarray:
        """The link-register wavefunction, requiring every bookkeeping
        register to be back in |0>."""
        psi = self.state.amps.reshape(-1, self.model.dim)
        if psi.shape[0] > 1 and np.abs(psi[1:]).max() > 1e-9:
            raise RuntimeError("bookkeeping registers are not reset")
        return psi[0].copy()
