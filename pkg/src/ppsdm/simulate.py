"""Synthetic data for every model in the package.

Point processes are simulated at cell resolution: the count in cell ``i`` is
Poisson with mean ``w_i * lambda(s_i)``, which is exactly what the two-step
construction (Poisson total, then i.i.d. locations with density
``lambda / Lambda``) produces after binning.

Random streams are Philox generators keyed by ``(seed, replicate, tag)`` so
replicates can run in any order or in parallel with identical output.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import expit

from .grid import CovariateGrid, PresenceSet


def rng_stream(seed: int, replicate: int = 0, tag: str = "") -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(replicate), zlib.crc32(tag.encode())]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return rng_stream(int(seed))


# ---------------------------------------------------------------------------
# synthetic grids
# ---------------------------------------------------------------------------


def lattice_grid(nrow: int, ncol: int, area: float = 1.0, features: Optional[Callable] = None,
                 n_bias: int = 0, n_access: int = 0, seed: int = 0) -> CovariateGrid:
    """Regular ``nrow x ncol`` lattice on a square of the given area.

    ``features(lon, lat) -> (m, p)`` defaults to two smooth surfaces. Bias and
    accessibility covariates are smooth random fields drawn from ``seed``.
    """
    side = np.sqrt(area)
    lon = (np.arange(ncol) + 0.5) / ncol * side
    lat = (np.arange(nrow) + 0.5) / nrow * side
    LON, LAT = np.meshgrid(lon, lat)
    lon_f, lat_f = LON.ravel() / side, LAT.ravel() / side
    if features is None:
        X = np.column_stack([
            np.sin(2.0 * np.pi * lon_f) + lat_f,
            np.cos(np.pi * lat_f) * (lon_f - 0.5) * 2.0,
        ])
    else:
        X = np.asarray(features(lon_f, lat_f), dtype=float).reshape(lon_f.size, -1)
    rng = rng_stream(seed, 0, "lattice")

    def field(k):
        cols = []
        for _ in range(k):
            a, b, c = rng.uniform(0.5, 2.5, size=3)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            cols.append(np.sin(a * np.pi * lon_f + ph[0]) * np.cos(b * np.pi * lat_f + ph[1]) + c * (lon_f - 0.5))
        return np.column_stack(cols) if cols else None

    m = nrow * ncol
    return CovariateGrid(
        w=np.full(m, area / m), X=X, counts=np.zeros(m, dtype=np.int64), area=area,
        lon=LON.ravel(), lat=LAT.ravel(), Z=field(n_bias), V=field(n_access),
    )


def random_grid(m: int, p: int, seed: int = 0, area: float = 1.0, n_bias: int = 0, n_access: int = 0,
                uniform_weights: bool = True) -> CovariateGrid:
    """Unstructured grid with standard-normal features."""
    rng = rng_stream(seed, 0, "random_grid")
    X = rng.standard_normal((m, p))
    if uniform_weights:
        w = np.full(m, area / m)
    else:
        w = rng.uniform(0.5, 1.5, size=m)
        w *= area / w.sum()
    Z = rng.standard_normal((m, n_bias)) if n_bias else None
    V = rng.standard_normal((m, n_access)) if n_access else None
    return CovariateGrid(w=w, X=X, counts=np.zeros(m, dtype=np.int64), area=float(w.sum()), Z=Z, V=V)


# ---------------------------------------------------------------------------
# point processes
# ---------------------------------------------------------------------------


def _intensity(truth, grid: CovariateGrid) -> np.ndarray:
    from .intensity import intensities

    if callable(truth):
        return np.asarray(truth(grid), dtype=float)
    if isinstance(truth, np.ndarray) or isinstance(truth, (list, tuple)):
        theta = np.asarray(truth, dtype=float)
        return np.exp(np.minimum(theta[0] + grid.X @ theta[1:], 700.0))
    return intensities(truth, grid)


def simulate_counts(truth, grid: CovariateGrid, seed) -> np.ndarray:
    lam = _intensity(truth, grid)
    return _rng(seed).poisson(grid.w * lam).astype(np.int64)


def simulate_ppp(truth, grid: CovariateGrid, seed) -> PresenceSet:
    """Cell-level Poisson realisation of the process with intensity ``truth``.

    ``truth`` is a parameter vector ``(theta0, theta1...)``, a model from
    :mod:`ppsdm.intensity`, or a callable returning per-cell intensities.
    """
    return PresenceSet.from_counts(grid.ids, simulate_counts(truth, grid, seed))


def simulate_grid(truth, grid: CovariateGrid, seed) -> CovariateGrid:
    """``grid`` carrying a fresh presence realisation."""
    return grid.with_counts(simulate_counts(truth, grid, seed))


def thin(presence: Union[PresenceSet, np.ndarray], detect_prob, seed, grid: Optional[CovariateGrid] = None):
    """Keep each point independently with its cell's detection probability.

    ``detect_prob`` is a scalar, a per-cell array aligned with the grid, or a
    callable of the grid. With a :class:`PresenceSet` the probabilities are
    looked up by cell id (``grid`` required unless the probability is scalar).
    """
    rng = _rng(seed)
    if isinstance(presence, PresenceSet):
        if callable(detect_prob):
            detect_prob = detect_prob(grid)
        p = np.asarray(detect_prob, dtype=float)
        if p.ndim:
            pos = {int(i): k for k, i in enumerate(grid.ids)}
            p = p[[pos[int(i)] for i in presence.indices]]
        _check_prob(p)
        kept = rng.binomial(presence.counts, np.broadcast_to(p, presence.counts.shape))
        return PresenceSet.from_counts(presence.indices, kept)
    counts = np.asarray(presence, dtype=np.int64)
    if callable(detect_prob):
        detect_prob = detect_prob(grid)
    p = np.broadcast_to(np.asarray(detect_prob, dtype=float), counts.shape)
    _check_prob(p)
    return rng.binomial(counts, p).astype(np.int64)


def _check_prob(p) -> None:
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("detection probabilities must lie in [0, 1]")


# ---------------------------------------------------------------------------
# site occupancy and distance sampling
# ---------------------------------------------------------------------------


def simulate_so(beta, tau, design, grid: CovariateGrid, seed):
    """Repeat-visit detection matrix for the regions of ``design``.

    Region ``i`` is occupied with probability ``1 - exp(-int_{C_i} lambda0)``;
    occupied regions are detected on visit ``j`` with probability
    ``logistic(tau . z_ij)``.
    """
    from .integrated import SurveyData, occupancy_probs

    rng = _rng(seed)
    psi = occupancy_probs(np.asarray(beta, dtype=float), grid, design)
    occupied = rng.random(design.K) < psi
    p = expit(design.zdet @ np.asarray(tau, dtype=float))
    y = (rng.random((design.K, design.T)) < p) & occupied[:, None]
    return SurveyData(y.astype(np.int8))


def simulate_ds(beta, omega, grid_b: CovariateGrid, seed):
    """Distance-sampling detections: Poisson counts thinned by a half-normal."""
    from .integrated import DsData, halfnormal_detection

    rng = _rng(seed)
    theta = np.asarray(beta, dtype=float)
    lam0 = np.exp(theta[0] + grid_b.X @ theta[1:])
    counts = rng.poisson(grid_b.w * lam0)
    pi = halfnormal_detection(np.asarray(omega, dtype=float), grid_b.distance, grid_b.U)
    kept = rng.binomial(counts, pi)
    cells = np.repeat(np.arange(grid_b.m), kept)
    return DsData(cell=cells, distance=grid_b.distance[cells], U=grid_b.U[cells])


@dataclass
class SimConfig:
    seed: int
    replicates: int
    truth: np.ndarray
    grid: CovariateGrid
    design: Optional[object] = None

    def stream(self, replicate: int, tag: str) -> np.random.Generator:
        return rng_stream(self.seed, replicate, tag)
