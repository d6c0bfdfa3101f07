"""Lossy, finite-resolution photon counter model.

A detector with quantum efficiency eta detects each photon independently with
probability eta (binomial thinning) and can only distinguish 0, 1, ..., M-1 or
">= M" detected photons, so the M-th outcome is an overflow bin collecting all
higher counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .states import PhotonDistribution

BIN_TOL = 1e-12


@dataclass(frozen=True)
class EfficiencyGrid:
    """Strictly increasing quantum efficiencies eta_1 < ... < eta_K in (0, 1]."""

    etas: np.ndarray

    def __post_init__(self):
        etas = np.array(self.etas, dtype=float)
        if etas.ndim != 1 or etas.size < 1:
            raise ValueError("need at least one efficiency")
        if np.any(etas <= 0) or np.any(etas > 1):
            raise ValueError("efficiencies must lie in (0, 1]")
        if np.any(np.diff(etas) <= 0):
            raise ValueError("efficiencies must be strictly increasing")
        etas.setflags(write=False)
        object.__setattr__(self, "etas", etas)

    @property
    def K(self) -> int:
        return self.etas.size


@dataclass(frozen=True)
class DetectorConfig:
    """Counting capability M (outcomes 0..M) and photon-number cutoff N."""

    M: int
    N: int

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("counting capability M must be >= 1")
        if self.N < self.M:
            raise ValueError(f"cutoff N={self.N} must be >= M={self.M}")


@dataclass(frozen=True)
class BinnedDistribution:
    """Probabilities of the M+1 detector outcomes (index M is the overflow bin)."""

    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.ndim != 1 or q.size < 2:
            raise ValueError("outcome vector must be 1-D with at least 2 entries")
        if np.any(q < 0):
            raise ValueError("outcome probabilities must be nonnegative")
        if abs(q.sum() - 1.0) > BIN_TOL:
            raise ValueError(f"outcome probabilities must sum to 1 within {BIN_TOL}")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def M(self) -> int:
        return self.q.size - 1


@dataclass(frozen=True)
class ResponseTensor:
    """Binned detection probabilities B[nu, m, n] over an efficiency grid.

    Shape (K, M+1, N+1); B[nu, m, n] is the probability that n incident photons
    produce outcome m at efficiency eta_nu, with row m=M holding the overflow.
    Every photon number must land in some outcome: sum_m B[nu, m, n] = 1.
    """

    B: np.ndarray
    etas: np.ndarray

    def __post_init__(self):
        B = np.array(self.B, dtype=float)
        etas = np.array(self.etas, dtype=float)
        if B.ndim != 3:
            raise ValueError("response tensor must have shape (K, M+1, N+1)")
        if etas.shape != (B.shape[0],):
            raise ValueError("one efficiency per tensor slice required")
        if np.any(B < 0) or np.any(B > 1):
            raise ValueError("tensor entries must be probabilities in [0, 1]")
        col = B.sum(axis=1)
        if np.max(np.abs(col - 1.0)) > BIN_TOL:
            raise ValueError("each photon number must yield some outcome (columns must sum to 1)")
        B.setflags(write=False)
        etas.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "etas", etas)

    @property
    def K(self) -> int:
        return self.B.shape[0]

    @property
    def M(self) -> int:
        return self.B.shape[1] - 1

    @property
    def N(self) -> int:
        return self.B.shape[2] - 1


def binomial_response(eta: float, m: int, n: int) -> float:
    """Probability of detecting m photons out of n at efficiency eta.

    C(n, m) (1-eta)^(n-m) eta^m, evaluated through log-gamma so that n of a few
    hundred stays finite. m > n returns 0.
    """
    _check_eta(eta)
    if m < 0 or n < 0:
        raise ValueError("photon counts must be nonnegative")
    if m > n:
        return 0.0
    if eta == 0.0:
        return 1.0 if m == 0 else 0.0
    if eta == 1.0:
        return 1.0 if m == n else 0.0
    log_comb = gammaln(n + 1) - gammaln(m + 1) - gammaln(n - m + 1)
    return float(np.exp(log_comb + m * np.log(eta) + (n - m) * np.log1p(-eta)))


def response_matrix(eta: float, N: int) -> np.ndarray:
    """Full loss kernel A[m, n] = binomial_response(eta, m, n) for m, n in 0..N."""
    _check_eta(eta)
    if N < 1:
        raise ValueError("N must be >= 1")
    if eta == 0.0:
        A = np.zeros((N + 1, N + 1))
        A[0, :] = 1.0
        return A
    if eta == 1.0:
        return np.eye(N + 1)
    n = np.arange(N + 1)
    m = n[:, None]
    diff = n[None, :] - m
    log_comb = gammaln(n + 1)[None, :] - gammaln(m + 1) - gammaln(np.clip(diff, 0, None) + 1)
    logA = log_comb + m * np.log(eta) + np.clip(diff, 0, None) * np.log1p(-eta)
    return np.where(diff >= 0, np.exp(logA), 0.0)


def detection_distribution(rho, eta: float) -> np.ndarray:
    """Statistics of the detected photons: p(m) = sum_{n>=m} A(m, n) rho_n."""
    probs = rho.probs if isinstance(rho, PhotonDistribution) else np.asarray(rho, dtype=float)
    return response_matrix(eta, probs.size - 1) @ probs


def bin_outcomes(p, M: int) -> BinnedDistribution:
    """Merge detected-photon statistics into M+1 outcomes with overflow at m = M."""
    p = np.asarray(p, dtype=float)
    if M < 1:
        raise ValueError("counting capability M must be >= 1")
    if p.size < M:
        raise ValueError(f"distribution over 0..{p.size - 1} cannot fill {M} resolved outcomes")
    q = np.empty(M + 1)
    q[:M] = p[:M]
    q[M] = max(1.0 - q[:M].sum(), 0.0)
    return BinnedDistribution(q)


def build_response_tensor(grid: EfficiencyGrid, cfg: DetectorConfig) -> ResponseTensor:
    """Assemble B[nu, m, n] for every efficiency with the overflow row included."""
    B = np.zeros((grid.K, cfg.M + 1, cfg.N + 1))
    for k, eta in enumerate(grid.etas):
        A = response_matrix(eta, cfg.N)
        B[k, : cfg.M] = A[: cfg.M]
        B[k, cfg.M] = np.maximum(1.0 - A[: cfg.M].sum(axis=0), 0.0)
    return ResponseTensor(B, grid.etas)


def outcome_probabilities(tensor: ResponseTensor, rho) -> np.ndarray:
    """Model outcome probabilities q[nu, m] for a photon distribution."""
    probs = rho.probs if isinstance(rho, PhotonDistribution) else np.asarray(rho, dtype=float)
    if probs.size != tensor.N + 1:
        raise ValueError(f"distribution length {probs.size} does not match tensor N={tensor.N}")
    return tensor.B @ probs


def binned_distributions(rho, grid: EfficiencyGrid, M: int) -> list[BinnedDistribution]:
    """Exact outcome distributions of ``rho`` at every grid efficiency."""
    return [bin_outcomes(detection_distribution(rho, eta), M) for eta in grid.etas]


def uniform_efficiency_grid(K: int, eta_max: float) -> EfficiencyGrid:
    """Arithmetic grid eta_nu = nu * eta_max / K, nu = 1..K."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 < eta_max <= 1:
        raise ValueError(f"eta_max must lie in (0, 1], got {eta_max}")
    return EfficiencyGrid(np.arange(1, K + 1) * (eta_max / K))


def _check_eta(eta: float) -> None:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"efficiency must lie in [0, 1], got {eta}")
