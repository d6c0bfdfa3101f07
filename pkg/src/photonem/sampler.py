"""Finite-sample outcome counts from binned detector distributions.

Reproducibility contract: all sampling uses numpy's PCG64 generator. The row
for efficiency index nu (1-based) is drawn from ``default_rng([seed, nu])``,
i.e. the master seed and the row index are mixed through numpy's SeedSequence.
Rows are therefore independent of each other and of execution order, and
identical (inputs, seed) reproduce identical counts bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import BinnedDistribution

FREQ_TOL = 1e-12


@dataclass(frozen=True)
class OutcomeCounts:
    """Event counts per (efficiency, outcome), each row summing to runs_per_eta."""

    counts: np.ndarray
    runs_per_eta: int
    etas: np.ndarray | None = None

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            raise ValueError("counts must be a (K, M+1) matrix")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        if self.runs_per_eta < 1:
            raise ValueError("runs_per_eta must be >= 1")
        row_sums = counts.sum(axis=1)
        if np.any(row_sums != self.runs_per_eta):
            raise ValueError(
                f"every row must sum to runs_per_eta={self.runs_per_eta}, got {row_sums.tolist()}"
            )
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        if self.etas is not None:
            etas = np.array(self.etas, dtype=float)
            if etas.shape != (counts.shape[0],):
                raise ValueError("need one efficiency label per row")
            etas.setflags(write=False)
            object.__setattr__(self, "etas", etas)

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def M(self) -> int:
        return self.counts.shape[1] - 1


@dataclass(frozen=True)
class OutcomeFrequencies:
    """Relative outcome frequencies f[nu, m]; rows sum to 1."""

    freqs: np.ndarray
    runs_per_eta: int | None = None

    def __post_init__(self):
        freqs = np.array(self.freqs, dtype=float)
        if freqs.ndim != 2:
            raise ValueError("frequencies must be a (K, M+1) matrix")
        if np.any(freqs < 0):
            raise ValueError("frequencies must be nonnegative")
        if np.max(np.abs(freqs.sum(axis=1) - 1.0)) > FREQ_TOL:
            raise ValueError(f"each frequency row must sum to 1 within {FREQ_TOL}")
        freqs.setflags(write=False)
        object.__setattr__(self, "freqs", freqs)

    @property
    def K(self) -> int:
        return self.freqs.shape[0]

    @property
    def M(self) -> int:
        return self.freqs.shape[1] - 1


def multinomial_draw(rng: np.random.Generator, n: int, p: np.ndarray) -> np.ndarray:
    """One multinomial draw of size n via sequential binomial conditioning."""
    p = np.asarray(p, dtype=float)
    out = np.zeros(p.size, dtype=np.int64)
    remaining = n
    tail = 1.0
    for j in range(p.size - 1):
        if remaining == 0:
            break
        cond = 0.0 if tail <= 0 else min(max(p[j] / tail, 0.0), 1.0)
        out[j] = rng.binomial(remaining, cond)
        remaining -= out[j]
        tail -= p[j]
    out[p.size - 1] = remaining
    return out


def sample_counts(
    q_per_eta: list[BinnedDistribution],
    n_runs: int,
    seed: int,
    etas=None,
) -> OutcomeCounts:
    """Draw one independent multinomial row of size n_runs per efficiency setting.

    Row nu (1-based) uses the sub-generator ``default_rng([seed, nu])``; see the
    module docstring for the reproducibility guarantees.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if not q_per_eta:
        raise ValueError("need at least one outcome distribution")
    sizes = {q.q.size for q in q_per_eta}
    if len(sizes) != 1:
        raise ValueError("all outcome distributions must have the same number of outcomes")
    rows = []
    for nu, dist in enumerate(q_per_eta, start=1):
        rng = np.random.default_rng([int(seed), nu])
        rows.append(multinomial_draw(rng, n_runs, dist.q))
    return OutcomeCounts(np.vstack(rows), n_runs, etas=etas)


def to_frequencies(counts: OutcomeCounts) -> OutcomeFrequencies:
    """Relative frequencies f[nu, m] = counts[nu, m] / runs_per_eta."""
    return OutcomeFrequencies(counts.counts / counts.runs_per_eta, counts.runs_per_eta)


def exact_frequencies(q_per_eta: list[BinnedDistribution]) -> OutcomeFrequencies:
    """Infinite-sample limit: frequencies equal to the model probabilities."""
    if not q_per_eta:
        raise ValueError("need at least one outcome distribution")
    return OutcomeFrequencies(np.vstack([d.q for d in q_per_eta]))


def write_counts_csv(counts: OutcomeCounts, path) -> None:
    """Serialize counts as rows (nu, eta, m, count); nu is 1-based."""
    if counts.etas is None:
        raise ValueError("counts carry no efficiency labels; cannot serialize")
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["nu", "eta", "m", "count"])
        for i in range(counts.K):
            for m in range(counts.M + 1):
                writer.writerow([i + 1, repr(float(counts.etas[i])), m, int(counts.counts[i, m])])


def read_counts_csv(path) -> OutcomeCounts:
    """Parse the (nu, eta, m, count) CSV emitted by this module or by ingestion."""
    path = Path(path)
    per_nu: dict[int, dict[int, int]] = {}
    eta_of: dict[int, float] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"nu", "eta", "m", "count"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{path}: expected header with columns {sorted(required)}")
        for row in reader:
            nu = int(row["nu"])
            m = int(row["m"])
            eta = float(row["eta"])
            count = int(row["count"])
            per_nu.setdefault(nu, {})
            if m in per_nu[nu]:
                raise ValueError(f"{path}: duplicate entry for nu={nu}, m={m}")
            per_nu[nu][m] = count
            if nu in eta_of and eta_of[nu] != eta:
                raise ValueError(f"{path}: conflicting eta for nu={nu}")
            eta_of[nu] = eta
    if not per_nu:
        raise ValueError(f"{path}: no data rows")
    nus = sorted(per_nu)
    if nus != list(range(1, len(nus) + 1)):
        raise ValueError(f"{path}: nu values must be contiguous starting at 1, got {nus}")
    m_sets = {tuple(sorted(per_nu[nu])) for nu in nus}
    if len(m_sets) != 1:
        raise ValueError(f"{path}: every nu must list the same outcomes")
    ms = sorted(per_nu[nus[0]])
    if ms != list(range(len(ms))):
        raise ValueError(f"{path}: outcomes must be contiguous starting at 0, got {ms}")
    counts = np.array([[per_nu[nu][m] for m in ms] for nu in nus], dtype=np.int64)
    totals = set(counts.sum(axis=1).tolist())
    if len(totals) != 1:
        raise ValueError(f"{path}: unequal runs per efficiency: {sorted(totals)}")
    etas = np.array([eta_of[nu] for nu in nus])
    return OutcomeCounts(counts, int(totals.pop()), etas=etas)
