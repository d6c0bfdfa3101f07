"""Truncated photon-number distributions for common optical states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class PhotonDistribution:
    """Photon-number statistics on the truncated range n = 0..N.

    ``tail_mass`` records the analytic probability discarded beyond N by the
    generator (0 for exact finite-support states); callers can use it to warn
    when the truncation is too aggressive.
    """

    probs: np.ndarray
    truncation: int
    tail_mass: float = 0.0

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 1:
            raise ValueError("probs must be a 1-D vector")
        if self.truncation != probs.size - 1:
            raise ValueError(
                f"truncation N={self.truncation} inconsistent with vector length {probs.size}"
            )
        if self.truncation < 1:
            raise ValueError("truncation N must be >= 1")
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        total = probs.sum()
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"probabilities must sum to 1 within {NORMALIZATION_TOL}, got {total!r}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def mean(self) -> float:
        """Average photon number of the truncated distribution."""
        return float(self.probs @ np.arange(self.probs.size))

    def __len__(self) -> int:
        return self.probs.size


def _finalize(probs: np.ndarray, N: int, tail_mass: float) -> PhotonDistribution:
    total = probs.sum()
    if total <= 0:
        raise ValueError("distribution has no mass on 0..N")
    return PhotonDistribution(probs / total, N, float(tail_mass))


def coherent_distribution(mean: float, N: int) -> PhotonDistribution:
    """Poissonian photon statistics of a coherent state, renormalized on 0..N."""
    _check_mean_and_cutoff(mean, N)
    probs = poisson.pmf(np.arange(N + 1), mean)
    return _finalize(probs, N, poisson.sf(N, mean))


def thermal_distribution(mean: float, N: int) -> PhotonDistribution:
    """Geometric photon statistics of a thermal state, renormalized on 0..N."""
    _check_mean_and_cutoff(mean, N)
    if mean == 0:
        probs = np.zeros(N + 1)
        probs[0] = 1.0
        return _finalize(probs, N, 0.0)
    n = np.arange(N + 1)
    ratio = mean / (1.0 + mean)
    probs = np.exp(n * np.log(ratio)) / (1.0 + mean)
    return _finalize(probs, N, ratio ** (N + 1))


def fock_distribution(n0: int, N: int) -> PhotonDistribution:
    """Deterministic photon number: a delta at n = n0."""
    _check_cutoff(N)
    if not 0 <= n0 <= N:
        raise ValueError(f"Fock index n0={n0} outside 0..{N}")
    probs = np.zeros(N + 1)
    probs[n0] = 1.0
    return PhotonDistribution(probs, N)


def fock_superposition_distribution(n_lo: int, n_hi: int, N: int) -> PhotonDistribution:
    """Photon statistics of an equal two-Fock superposition: 1/2 at n_lo and n_hi."""
    _check_cutoff(N)
    if not (0 <= n_lo < n_hi <= N):
        raise ValueError(f"need 0 <= n_lo < n_hi <= N, got n_lo={n_lo}, n_hi={n_hi}, N={N}")
    probs = np.zeros(N + 1)
    probs[n_lo] = 0.5
    probs[n_hi] = 0.5
    return PhotonDistribution(probs, N)


def custom_distribution(probs) -> PhotonDistribution:
    """Wrap a user-supplied probability vector (renormalized)."""
    arr = np.asarray(probs, dtype=float)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("custom distribution needs a 1-D vector of length >= 2")
    if np.any(arr < 0):
        raise ValueError("probabilities must be nonnegative")
    return _finalize(arr, arr.size - 1, 0.0)


def _check_mean_and_cutoff(mean: float, N: int) -> None:
    if mean < 0:
        raise ValueError(f"mean photon number must be >= 0, got {mean}")
    _check_cutoff(N)


def _check_cutoff(N: int) -> None:
    if int(N) != N or N < 1:
        raise ValueError(f"truncation N must be an integer >= 1, got {N!r}")
