"""Iterative maximum-likelihood inversion of the multi-efficiency counting model.

The estimate is refined by the multiplicative EM update

    rho'_n = rho_n * [sum_{nu,m} B(nu,m,n)]^-1 * sum_{nu,m} B(nu,m,n) f(nu,m) / q(nu,m)

with q = B rho the model outcome probabilities and f the observed frequencies.
Both sums run over the full outcome set m = 0..M including the overflow bin,
so the normalizing factor equals K and the update preserves nonnegativity and
total probability exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import ResponseTensor
from .sampler import OutcomeFrequencies
from .states import PhotonDistribution


class ModelInconsistencyError(RuntimeError):
    """An outcome was observed that the current model assigns zero probability.

    Usually means the photon-number cutoff N is too small for the data.
    """


class RankDeficiencyError(ValueError):
    """The linear system cannot determine all N+1 unknowns."""

    def __init__(self, message: str, rank: int):
        super().__init__(message)
        self.rank = rank


@dataclass(frozen=True)
class StoppingRule:
    """When to stop iterating.

    The run always performs at least ``max_iterations`` steps (the cap).  The
    rate of decrease of the total absolute error is monitored over a sliding
    window; if the error has not yet converged when the cap is reached and
    ``extend_until_converged`` is set, iteration continues until convergence is
    first seen, bounded by ``extension_factor * max_iterations``.  Stopping at
    the cap even though the error converged earlier is deliberate: extra
    iterations on converged data keep improving the estimate.
    """

    max_iterations: int
    convergence_window: int = 100
    epsilon_rate_threshold: float = 1e-6
    extend_until_converged: bool = True
    extension_factor: int = 300
    trace_stride: int | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be >= 1")
        if self.epsilon_rate_threshold <= 0:
            raise ValueError("epsilon_rate_threshold must be > 0")
        if self.extension_factor < 1:
            raise ValueError("extension_factor must be >= 1")
        if self.trace_stride is not None and self.trace_stride < 1:
            raise ValueError("trace_stride must be >= 1")


@dataclass(frozen=True)
class ReconstructionResult:
    """Final estimate plus decimated diagnostic traces."""

    rho_final: PhotonDistribution
    trace_iterations: np.ndarray
    epsilon_trace: np.ndarray
    loglik_trace: np.ndarray
    fidelity_trace: np.ndarray | None
    iterations_run: int
    stop_reason: str
    converged_at: int | None

    def to_dict(self) -> dict:
        out = {
            "rho_final": self.rho_final.probs.tolist(),
            "truncation": self.rho_final.truncation,
            "iterations_run": self.iterations_run,
            "stop_reason": self.stop_reason,
            "converged_at": self.converged_at,
            "final_epsilon": float(self.epsilon_trace[-1]),
            "final_loglik": float(self.loglik_trace[-1]),
            "trace_iterations": self.trace_iterations.tolist(),
            "epsilon_trace": self.epsilon_trace.tolist(),
            "loglik_trace": self.loglik_trace.tolist(),
        }
        if self.fidelity_trace is not None:
            out["fidelity_trace"] = self.fidelity_trace.tolist()
            out["final_fidelity"] = float(self.fidelity_trace[-1])
        return out

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def save_traces_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["iteration", "epsilon", "loglik"]
            if self.fidelity_trace is not None:
                header.append("fidelity")
            writer.writerow(header)
            for j, it in enumerate(self.trace_iterations):
                row = [int(it), repr(float(self.epsilon_trace[j])), repr(float(self.loglik_trace[j]))]
                if self.fidelity_trace is not None:
                    row.append(repr(float(self.fidelity_trace[j])))
                writer.writerow(row)


def _freq_matrix(f) -> np.ndarray:
    return f.freqs if isinstance(f, OutcomeFrequencies) else np.asarray(f, dtype=float)


def _flatten_system(tensor: ResponseTensor, f) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    fm = _freq_matrix(f)
    if fm.shape != (tensor.K, tensor.M + 1):
        raise ValueError(
            f"frequencies of shape {fm.shape} do not match tensor shape {(tensor.K, tensor.M + 1)}"
        )
    B2 = np.ascontiguousarray(tensor.B.reshape(-1, tensor.N + 1))
    BT = np.ascontiguousarray(B2.T)
    return B2, BT, fm.reshape(-1), BT @ np.ones(B2.shape[0])


def _update_factor(BT: np.ndarray, ff: np.ndarray, q: np.ndarray) -> np.ndarray:
    """sum_{nu,m} B(nu,m,n) f/q with observed-zero bins contributing nothing."""
    if q.min() > 0.0:
        return BT @ (ff / q)
    bad = (ff > 0) & (q <= 0)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise ModelInconsistencyError(
            f"frequency {ff[idx]!r} observed in a bin with zero model probability "
            f"(flat index {idx}); the model cannot explain the data (N too small?)"
        )
    ratio = np.zeros_like(ff)
    np.divide(ff, q, out=ratio, where=q > 0)
    return BT @ ratio


def em_step(rho: PhotonDistribution, tensor: ResponseTensor, f) -> PhotonDistribution:
    """One multiplicative update of the estimate (see module docstring)."""
    if len(rho) != tensor.N + 1:
        raise ValueError(f"estimate length {len(rho)} does not match tensor N={tensor.N}")
    B2, BT, ff, denom = _flatten_system(tensor, f)
    q = B2 @ rho.probs
    new = rho.probs * _update_factor(BT, ff, q) / denom
    return PhotonDistribution(new, rho.truncation)


def total_absolute_error(f, q) -> float:
    """L1 distance between observed frequencies and model probabilities."""
    fm = _freq_matrix(f)
    qm = np.asarray(q, dtype=float)
    if fm.shape != qm.shape:
        raise ValueError(f"shape mismatch: frequencies {fm.shape} vs model {qm.shape}")
    return float(np.abs(fm - qm).sum())


def fidelity(a, b) -> float:
    """Bhattacharyya coefficient sum_n sqrt(a_n b_n); 1 iff the inputs coincide."""
    pa = a.probs if isinstance(a, PhotonDistribution) else np.asarray(a, dtype=float)
    pb = b.probs if isinstance(b, PhotonDistribution) else np.asarray(b, dtype=float)
    if pa.shape != pb.shape:
        raise ValueError(f"length mismatch: {pa.shape} vs {pb.shape}")
    return min(float(np.sqrt(pa * pb).sum()), 1.0)


def log_likelihood(f, n_runs: int, q) -> float:
    """log L = n_runs * sum_{nu,m} f(nu,m) log q(nu,m)."""
    fm = _freq_matrix(f)
    qm = np.asarray(q, dtype=float)
    if fm.shape != qm.shape:
        raise ValueError(f"shape mismatch: frequencies {fm.shape} vs model {qm.shape}")
    pos = fm > 0
    if np.any(qm[pos] <= 0):
        raise ModelInconsistencyError("zero model probability in a bin with nonzero frequency")
    return float(n_runs * (fm[pos] * np.log(qm[pos])).sum())


def reconstruct(
    f,
    tensor: ResponseTensor,
    rule: StoppingRule,
    reference: PhotonDistribution | None = None,
) -> ReconstructionResult:
    """Run the EM iteration from the uniform initializer.

    Args:
        f: observed outcome frequencies, shape (K, M+1).
        tensor: detector response over the same efficiency grid.
        rule: stopping parameters; the cap is normally the number of runs per
            efficiency setting.
        reference: optional true distribution; when given, a fidelity trace
            against it is recorded.

    Returns:
        ReconstructionResult with the final estimate and decimated traces of
        the total absolute error, the log-likelihood, and (if a reference was
        given) the fidelity. Trace entries are recorded every ``trace_stride``
        iterations (default cap/1000) and always at the final iterate.
    """
    B2, BT, ff, denom = _flatten_system(tensor, f)
    n_runs = 1
    if isinstance(f, OutcomeFrequencies) and f.runs_per_eta:
        n_runs = f.runs_per_eta
    ref = None if reference is None else reference.probs
    if ref is not None and ref.size != tensor.N + 1:
        raise ValueError("reference distribution does not match tensor truncation")

    cap = rule.max_iterations
    ceiling = cap * rule.extension_factor if rule.extend_until_converged else cap
    stride = rule.trace_stride or max(1, cap // 1000)
    window = rule.convergence_window
    threshold = rule.epsilon_rate_threshold

    rho = np.full(tensor.N + 1, 1.0 / (tensor.N + 1))
    eps_ring = np.empty(window + 1)
    converged_at: int | None = None
    trace_i: list[int] = []
    trace_eps: list[float] = []
    trace_ll: list[float] = []
    trace_g: list[float] = []
    pos = ff > 0
    f_pos = ff[pos]

    i = 0
    while True:
        q = B2 @ rho
        eps = float(np.abs(ff - q).sum())
        eps_ring[i % (window + 1)] = eps
        if converged_at is None and i >= window:
            past = eps_ring[(i - window) % (window + 1)]
            if (past - eps) < threshold * max(past, 1e-300):
                converged_at = i

        stop_reason = None
        if i >= cap and converged_at is not None and converged_at <= cap:
            stop_reason = "cap_reached"
        elif i > cap and converged_at == i:
            stop_reason = "converged_early"
        elif i >= ceiling:
            stop_reason = "cap_reached"

        if i % stride == 0 or stop_reason is not None:
            if not trace_i or trace_i[-1] != i:
                trace_i.append(i)
                trace_eps.append(eps)
                if np.any(q[pos] <= 0):
                    raise ModelInconsistencyError(
                        "zero model probability in a bin with nonzero frequency"
                    )
                trace_ll.append(float(n_runs * (f_pos * np.log(q[pos])).sum()))
                if ref is not None:
                    trace_g.append(min(float(np.sqrt(rho * ref).sum()), 1.0))

        if stop_reason is not None:
            break

        rho = rho * _update_factor(BT, ff, q) / denom
        rho /= rho.sum()
        i += 1

    return ReconstructionResult(
        rho_final=PhotonDistribution(rho, tensor.N),
        trace_iterations=np.asarray(trace_i, dtype=np.int64),
        epsilon_trace=np.asarray(trace_eps),
        loglik_trace=np.asarray(trace_ll),
        fidelity_trace=np.asarray(trace_g) if ref is not None else None,
        iterations_run=i,
        stop_reason=stop_reason,
        converged_at=converged_at,
    )


def linear_inversion_baseline(f, tensor: ResponseTensor) -> np.ndarray:
    """Unconstrained least-squares solution of the flattened system B rho = f.

    Returned raw, without nonnegativity or normalization, to exhibit the noise
    amplification that makes direct inversion useless at low efficiency.
    Raises RankDeficiencyError when the system has fewer equations than
    unknowns.
    """
    B2, _, ff, _ = _flatten_system(tensor, f)
    rows, cols = B2.shape
    if rows < cols:
        rank = int(np.linalg.matrix_rank(B2))
        raise RankDeficiencyError(
            f"{rows} equations cannot determine {cols} unknowns (effective rank {rank})",
            rank,
        )
    solution, _, _, _ = np.linalg.lstsq(B2, ff, rcond=None)
    return solution
