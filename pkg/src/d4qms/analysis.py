"""Post-processing of sampled energy records.

Histograms on the estimation grid, Gaussian kernel density estimates with
blocked bootstrap error bars, step-CDF supremum distances, the
phase-estimation distortion model for comparing runs against exact
thermal weights, and the grid-distance heuristic that flags grids whose
sites fall badly between spectral levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .circuits import QpeGrid, qpe_coefficient_table
from .statevector import RngStream

ANALYSIS_STREAM_KEY = 3


@dataclass
class DistributionEstimate:
    """A distribution over energies: point masses or a sampled density."""

    support: np.ndarray
    values: np.ndarray
    errors: np.ndarray | None = None
    kind: str = "mass"              # "mass" | "density"
    provenance: str = "QMS-sampled"

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.support.shape != self.values.shape:
            raise ValueError("support and values must align")
        if self.errors is not None:
            self.errors = np.asarray(self.errors, dtype=float)
            if self.errors.shape != self.values.shape:
                raise ValueError("errors must align with values")
        if self.kind not in ("mass", "density"):
            raise ValueError("kind must be 'mass' or 'density'")

    def total(self) -> float:
        if self.kind == "mass":
            return float(self.values.sum())
        return float(np.trapezoid(self.values, self.support))

    def mean(self) -> float:
        if self.kind == "mass":
            return float(self.values @ self.support)
        w = self.values / self.total()
        return float(np.trapezoid(w * self.support, self.support))

    def as_dict(self) -> dict:
        out = {
            "support": self.support.tolist(),
            "values": self.values.tolist(),
            "kind": self.kind,
            "provenance": self.provenance,
        }
        if self.errors is not None:
            out["errors"] = self.errors.tolist()
        return out


@dataclass
class KdeParams:
    """Bandwidth, evaluation grid and resampling plan for the KDE."""

    bandwidth: float
    eval_grid: np.ndarray
    block_size: int = 100
    resamples: int = 100
    scheme: str = "bootstrap"       # "bootstrap" | "jackknife"

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.block_size < 1:
            raise ValueError("block size must be at least 1")
        if self.resamples < 1:
            raise ValueError("resample count must be at least 1")
        if self.scheme not in ("bootstrap", "jackknife"):
            raise ValueError("scheme must be 'bootstrap' or 'jackknife'")
        self.eval_grid = np.asarray(self.eval_grid, dtype=float)

    @staticmethod
    def for_grid(grid: QpeGrid, block_size: int = 100, resamples: int = 100,
                 scheme: str = "bootstrap", bandwidth: float = None,
                 points: int = 512) -> "KdeParams":
        """Default plan: bandwidth equal to the grid spacing, 512 evaluation
        points covering the grid padded by three bandwidths."""
        sigma = grid.spacing if bandwidth is None else bandwidth
        lo, hi = grid.e_min - 3.0 * sigma, grid.e_max + 3.0 * sigma
        return KdeParams(sigma, np.linspace(lo, hi, points), block_size, resamples, scheme)


# ----- blocking and resampling ---------------------------------------------


def _block_slices(n_values: int, chain_ids, block_size: int):
    """Consecutive index blocks that never straddle chain boundaries.

    Values are assumed grouped by chain in record order; a trailing
    partial block is kept so every sample contributes.
    """
    if chain_ids is None:
        bounds = [(0, n_values)]
    else:
        chain_ids = np.asarray(chain_ids)
        if chain_ids.shape != (n_values,):
            raise ValueError("chain ids must align with samples")
        change = np.flatnonzero(np.diff(chain_ids) != 0) + 1
        edges = np.concatenate([[0], change, [n_values]])
        bounds = list(zip(edges[:-1], edges[1:]))
    blocks = []
    for lo, hi in bounds:
        for start in range(lo, hi, block_size):
            blocks.append(np.arange(start, min(start + block_size, hi)))
    return blocks


def _resample_indices(blocks, scheme: str, resamples: int, rng: RngStream):
    """Yield index arrays, one per resampled dataset."""
    n = len(blocks)
    if scheme == "jackknife":
        for drop in range(n):
            yield np.concatenate([blocks[b] for b in range(n) if b != drop])
        return
    for s in range(resamples):
        sub = rng.spawn(s)
        picks = np.minimum((sub.uniform_array(n) * n).astype(int), n - 1)
        yield np.concatenate([blocks[b] for b in picks])


def _resample_spread(full: np.ndarray, resampled) -> np.ndarray:
    """Root mean square deviation of resample estimates around the
    full-data estimate."""
    acc = np.zeros_like(full)
    count = 0
    for est in resampled:
        acc += (est - full) ** 2
        count += 1
    return np.sqrt(acc / count)


# ----- kernel density --------------------------------------------------------


def kde(samples, params: KdeParams, chain_ids=None, rng: RngStream = None) -> DistributionEstimate:
    """Gaussian kernel density on the evaluation grid with blocked
    resampling errors.

    Samples are compressed to unique values first, so data confined to a
    small grid costs one kernel matrix regardless of resample count.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("empty dataset")
    rng = rng or RngStream(0, (ANALYSIS_STREAM_KEY,))
    uniq, inverse = np.unique(samples, return_inverse=True)
    sigma = params.bandwidth
    kernel = np.exp(-0.5 * ((params.eval_grid[:, None] - uniq[None, :]) / sigma) ** 2)
    kernel /= sigma * np.sqrt(2.0 * np.pi)

    def estimate(idx):
        counts = np.bincount(inverse[idx], minlength=uniq.size)
        return kernel @ (counts / idx.size)

    full_idx = np.arange(samples.size)
    density = estimate(full_idx)
    blocks = _block_slices(samples.size, chain_ids, params.block_size)
    errors = None
    if len(blocks) >= 2:
        resampled = (estimate(idx) for idx in _resample_indices(blocks, params.scheme, params.resamples, rng))
        errors = _resample_spread(density, resampled)
    return DistributionEstimate(params.eval_grid, density, errors, "density", "QMS-sampled")


# ----- step CDFs and the supremum distance -----------------------------------


def _as_mass(dist) -> DistributionEstimate:
    if isinstance(dist, DistributionEstimate):
        if dist.kind != "mass":
            raise ValueError("supremum distance needs point-mass distributions")
        return dist
    values = np.asarray(dist, dtype=float)
    uniq, counts = np.unique(values, return_counts=True)
    return DistributionEstimate(uniq, counts / values.size, None, "mass", "empirical")


def cdf_and_dsup(dist, reference) -> tuple:
    """Right-continuous step CDFs on the union of jump points and their
    supremum distance.

    Returns (points, cdf, reference cdf, d_sup).
    """
    a = _as_mass(dist)
    b = _as_mass(reference)
    points = np.union1d(a.support, b.support)

    def step_cdf(est):
        order = np.argsort(est.support, kind="stable")
        sup = est.support[order]
        cum = np.cumsum(est.values[order])
        pos = np.searchsorted(sup, points, side="right")
        return np.concatenate([[0.0], cum])[pos]

    fa = step_cdf(a)
    fb = step_cdf(b)
    return points, fa, fb, float(np.abs(fa - fb).max())


# ----- phase-estimation distortion model --------------------------------------


def qpe_distortion_model(spectrum, grid: QpeGrid, beta: float) -> tuple:
    """Predicted grid-site masses for thermal sampling seen through the
    estimation register.

    Every physical level k smears over grid sites with weights |c_kj|^2;
    its distorted mean energy feeds modified Gibbs weights, which in turn
    mix the smearing profiles into site masses.  Returns (estimate,
    distorted mean energy).
    """
    energies = np.asarray(spectrum.energies, dtype=float)
    mults = np.asarray(spectrum.multiplicities, dtype=float)
    coeffs = qpe_coefficient_table(energies, grid)        # (sites, levels)
    e_tilde = coeffs.T @ grid.energies
    logw = -beta * e_tilde
    logw -= logw.max()
    w_tilde = mults * np.exp(logw)
    w_tilde /= w_tilde.sum()
    masses = coeffs @ w_tilde
    estimate = DistributionEstimate(grid.energies, masses, None, "mass", "QPE-distorted-model")
    return estimate, float(e_tilde @ w_tilde)


def grid_dist(spectrum, grid: QpeGrid, beta: float) -> float:
    """Boltzmann-weighted root mean square offset between levels and the
    sites their estimates land on; zero when every level sits on a site.

    Each distinct level counts once: the mismatch is a property of where
    a level falls relative to the grid, not of its degeneracy.
    """
    energies = np.asarray(spectrum.energies, dtype=float)
    logw = -beta * energies
    logw -= logw.max()
    weights = np.exp(logw)
    weights /= weights.sum()
    coeffs = qpe_coefficient_table(energies, grid)        # (sites, levels)
    offsets2 = (energies[None, :] - grid.energies[:, None]) ** 2
    inner = np.sqrt(np.einsum("jk,jk->k", offsets2, coeffs))
    return float(weights @ inner)


# ----- grid histogram -----------------------------------------------------------


def histogram_on_grid(samples, grid: QpeGrid, chain_ids=None, block_size: int = 100,
                      resamples: int = 100, scheme: str = "bootstrap",
                      rng: RngStream = None) -> DistributionEstimate:
    """Relative frequency per grid site with blocked resampling errors.

    Every sample must sit on a grid energy; anything else signals a
    pipeline bug upstream and raises.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("empty dataset")
    rng = rng or RngStream(0, (ANALYSIS_STREAM_KEY,))
    idx_f = (samples - grid.e_min) / grid.spacing
    idx = np.rint(idx_f).astype(int)
    if np.abs(idx_f - idx).max() > 1e-9 or idx.min() < 0 or idx.max() >= grid.size:
        worst = int(np.argmax(np.abs(idx_f - np.rint(idx_f))))
        raise ValueError(f"sample {samples[worst]!r} is not a grid energy")

    def estimate(sel):
        return np.bincount(idx[sel], minlength=grid.size) / sel.size

    full_idx = np.arange(samples.size)
    masses = estimate(full_idx)
    blocks = _block_slices(samples.size, chain_ids, block_size)
    errors = None
    if len(blocks) >= 2:
        resampled = (estimate(sel) for sel in _resample_indices(blocks, scheme, resamples, rng))
        errors = _resample_spread(masses, resampled)
    return DistributionEstimate(grid.energies, masses, errors, "mass", "QMS-sampled")


# ----- scalar observables ---------------------------------------------------------


def scalar_observable_error(samples, block_size: int, resamples: int = 100,
                            rng: RngStream = None, chain_ids=None) -> tuple:
    """Mean of a scalar sample set with a blocked bootstrap error."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < block_size:
        raise ValueError("fewer samples than one block")
    rng = rng or RngStream(0, (ANALYSIS_STREAM_KEY,))
    blocks = _block_slices(samples.size, chain_ids, block_size)
    if len(blocks) < 2:
        raise ValueError("need at least two blocks for an error estimate")
    mean = float(samples.mean())
    means = np.array([
        samples[idx].mean() for idx in _resample_indices(blocks, "bootstrap", resamples, rng)
    ])
    return mean, float(np.sqrt(np.mean((means - mean) ** 2)))
