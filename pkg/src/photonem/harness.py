"""Experiment orchestration: single reconstructions, fidelity sweeps, baselines."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .detector import (
    DetectorConfig,
    EfficiencyGrid,
    binned_distributions,
    build_response_tensor,
    uniform_efficiency_grid,
)
from .ingest import PeakModel, ingest_spectra, load_spectrum
from .recon import (
    ReconstructionResult,
    StoppingRule,
    linear_inversion_baseline,
    reconstruct,
)
from .sampler import OutcomeCounts, sample_counts, to_frequencies, write_counts_csv
from .states import (
    PhotonDistribution,
    coherent_distribution,
    custom_distribution,
    fock_distribution,
    fock_superposition_distribution,
    thermal_distribution,
)

log = logging.getLogger("photonem")

TAIL_MASS_WARN = 1e-6

STATE_FAMILIES = ("coherent", "thermal", "fock", "fock_superposition", "custom")


class SpecValidationError(ValueError):
    """An experiment description violates a precondition."""


@dataclass(frozen=True)
class StateSpec:
    """Named state family plus its numeric parameters."""

    family: str
    mean: float | None = None
    n0: int | None = None
    n_lo: int | None = None
    n_hi: int | None = None
    probs: tuple[float, ...] | None = None

    def build(self, N: int) -> PhotonDistribution:
        try:
            if self.family == "coherent":
                return coherent_distribution(_require(self.mean, "mean"), N)
            if self.family == "thermal":
                return thermal_distribution(_require(self.mean, "mean"), N)
            if self.family == "fock":
                return fock_distribution(_require(self.n0, "n0"), N)
            if self.family == "fock_superposition":
                return fock_superposition_distribution(
                    _require(self.n_lo, "n_lo"), _require(self.n_hi, "n_hi"), N
                )
            if self.family == "custom":
                dist = custom_distribution(_require(self.probs, "probs"))
                if dist.truncation != N:
                    raise ValueError(
                        f"custom vector has truncation {dist.truncation}, experiment uses N={N}"
                    )
                return dist
        except ValueError as exc:
            raise SpecValidationError(f"state {self.describe()}: {exc}") from exc
        raise SpecValidationError(f"unknown state family {self.family!r}; choose from {STATE_FAMILIES}")

    @staticmethod
    def from_config(obj: dict) -> "StateSpec":
        if not isinstance(obj, dict) or "family" not in obj:
            raise SpecValidationError('state must be an object like {"family": "coherent", "mean": 3}')
        known = {"family", "mean", "n0", "n_lo", "n_hi", "probs"}
        unknown = set(obj) - known
        if unknown:
            raise SpecValidationError(f"unknown state keys {sorted(unknown)}; known: {sorted(known)}")
        probs = obj.get("probs")
        return StateSpec(
            family=obj["family"],
            mean=obj.get("mean"),
            n0=obj.get("n0"),
            n_lo=obj.get("n_lo"),
            n_hi=obj.get("n_hi"),
            probs=tuple(probs) if probs is not None else None,
        )

    @staticmethod
    def for_mean(family: str, mean: float) -> "StateSpec":
        """Sweep parameterization: one state per family at a given mean photon number."""
        if family in ("coherent", "thermal"):
            return StateSpec(family, mean=mean)
        n = int(round(mean))
        if n != mean:
            raise SpecValidationError(f"family {family!r} needs an integer mean, got {mean}")
        if family == "fock":
            return StateSpec(family, n0=n)
        if family == "fock_superposition":
            return StateSpec(family, n_lo=n - 1, n_hi=n + 1)
        raise SpecValidationError(f"family {family!r} cannot be swept by mean")

    def describe(self) -> str:
        parts = [self.family]
        for key in ("mean", "n0", "n_lo", "n_hi"):
            value = getattr(self, key)
            if value is not None:
                parts.append(f"{key}={value}")
        return " ".join(parts)


def _require(value, name):
    if value is None:
        raise ValueError(f"missing parameter {name!r}")
    return value


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative description of a simulation or reconstruction experiment."""

    name: str = "experiment"
    state: StateSpec | None = None
    states: tuple[str, ...] | None = None
    means: tuple[float, ...] | None = None
    M: int | tuple[int, ...] = 1
    eta_max: float | tuple[float, ...] = 0.2
    N: int = 30
    K: int = 30
    n_runs: int = 10_000
    replicas: int = 1
    seed: int = 0
    stopping: dict = field(default_factory=dict)
    out_dir: str = "out"

    _KEYS = {
        "name", "state", "states", "means", "M", "eta_max", "N", "K",
        "n_runs", "replicas", "seed", "stopping", "out_dir",
    }
    _STOPPING_KEYS = {"cap", "window", "threshold", "extend", "extension_factor", "trace_stride"}

    @staticmethod
    def from_dict(config: dict) -> "ExperimentSpec":
        unknown = set(config) - ExperimentSpec._KEYS
        if unknown:
            raise SpecValidationError(
                f"unknown config keys {sorted(unknown)}; known: {sorted(ExperimentSpec._KEYS)}"
            )
        stopping = config.get("stopping", {})
        if not isinstance(stopping, dict):
            raise SpecValidationError("stopping must be an object")
        bad = set(stopping) - ExperimentSpec._STOPPING_KEYS
        if bad:
            raise SpecValidationError(
                f"unknown stopping keys {sorted(bad)}; known: {sorted(ExperimentSpec._STOPPING_KEYS)}"
            )
        state = config.get("state")
        return ExperimentSpec(
            name=config.get("name", "experiment"),
            state=StateSpec.from_config(state) if state is not None else None,
            states=tuple(config["states"]) if "states" in config else None,
            means=tuple(config["means"]) if "means" in config else None,
            M=_int_or_tuple(config.get("M", 1), "M"),
            eta_max=_float_or_tuple(config.get("eta_max", 0.2), "eta_max"),
            N=int(config.get("N", 30)),
            K=int(config.get("K", 30)),
            n_runs=int(config.get("n_runs", 10_000)),
            replicas=int(config.get("replicas", 1)),
            seed=int(config.get("seed", 0)),
            stopping=dict(stopping),
            out_dir=str(config.get("out_dir", "out")),
        )

    @staticmethod
    def from_json(path) -> "ExperimentSpec":
        try:
            config = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecValidationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise SpecValidationError(f"{path}: top level must be an object")
        return ExperimentSpec.from_dict(config)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "M": list(self.M) if isinstance(self.M, tuple) else self.M,
            "eta_max": list(self.eta_max) if isinstance(self.eta_max, tuple) else self.eta_max,
            "N": self.N, "K": self.K, "n_runs": self.n_runs,
            "replicas": self.replicas, "seed": self.seed,
            "stopping": dict(self.stopping), "out_dir": self.out_dir,
        }
        if self.state is not None:
            out["state"] = {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in vars(self.state).items()
                if v is not None
            }
        if self.states is not None:
            out["states"] = list(self.states)
        if self.means is not None:
            out["means"] = list(self.means)
        return out

    def stopping_rule(self) -> StoppingRule:
        cap = self.stopping.get("cap")
        try:
            return StoppingRule(
                max_iterations=int(cap) if cap is not None else self.n_runs,
                convergence_window=int(self.stopping.get("window", 100)),
                epsilon_rate_threshold=float(self.stopping.get("threshold", 1e-6)),
                extend_until_converged=bool(self.stopping.get("extend", True)),
                extension_factor=int(self.stopping.get("extension_factor", 300)),
                trace_stride=self.stopping.get("trace_stride"),
            )
        except ValueError as exc:
            raise SpecValidationError(f"stopping rule: {exc}") from exc

    def validate_common(self) -> None:
        if self.N < 1:
            raise SpecValidationError(f"N must be >= 1, got {self.N}")
        if self.K < 1:
            raise SpecValidationError(f"K must be >= 1, got {self.K}")
        if self.n_runs < 1:
            raise SpecValidationError(f"n_runs must be >= 1, got {self.n_runs}")
        if self.replicas < 1:
            raise SpecValidationError(f"replicas must be >= 1, got {self.replicas}")
        if self.seed < 0:
            raise SpecValidationError("seed must be a nonnegative integer")
        for m in _as_tuple(self.M):
            if m < 1:
                raise SpecValidationError(f"M must be >= 1, got {m}")
            if m > self.N:
                raise SpecValidationError(f"M={m} exceeds truncation N={self.N}")
        for e in _as_tuple(self.eta_max):
            if not 0 < e <= 1:
                raise SpecValidationError(f"eta_max must lie in (0, 1], got {e}")
        self.stopping_rule()

    def validate_single(self) -> None:
        self.validate_common()
        if self.state is None:
            raise SpecValidationError('a single run needs a "state" entry')
        if isinstance(self.M, tuple) or isinstance(self.eta_max, tuple):
            raise SpecValidationError("a single run needs scalar M and eta_max")
        self.state.build(self.N)

    def validate_sweep(self) -> None:
        self.validate_common()
        if not self.states:
            raise SpecValidationError('a sweep needs a "states" list')
        if not self.means:
            raise SpecValidationError('a sweep needs a "means" list')
        if self.replicas < 2:
            raise SpecValidationError("a sweep needs replicas >= 2 for standard deviations")
        for family in self.states:
            if family not in STATE_FAMILIES or family == "custom":
                raise SpecValidationError(
                    f"cannot sweep family {family!r}; choose from "
                    f"{[f for f in STATE_FAMILIES if f != 'custom']}"
                )
        if "fock_superposition" in self.states and self.stopping.get("cap") is None:
            raise SpecValidationError(
                "sweeps over fock_superposition require an explicit stopping cap"
            )


def _as_tuple(value) -> tuple:
    return value if isinstance(value, tuple) else (value,)


def _int_or_tuple(value, name):
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return int(value)


def _float_or_tuple(value, name):
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return float(value)


def replica_seed(master: int, cell_index: int, replica: int) -> int:
    """Deterministic per-replica sub-seed, independent of execution order."""
    ss = np.random.SeedSequence([int(master), int(cell_index), int(replica)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class RunArtifacts:
    """Everything a single simulated reconstruction produced."""

    truth: PhotonDistribution
    counts: OutcomeCounts
    result: ReconstructionResult
    grid: EfficiencyGrid


def simulate_and_reconstruct(
    state: StateSpec,
    N: int,
    K: int,
    eta_max: float,
    M: int,
    n_runs: int,
    seed: int,
    rule: StoppingRule,
) -> RunArtifacts:
    """Shared core: generate truth, sample counts, reconstruct against the truth."""
    truth = state.build(N)
    if truth.tail_mass > TAIL_MASS_WARN:
        log.warning(
            "state %s discards %.3g probability beyond N=%d; increase N",
            state.describe(), truth.tail_mass, N,
        )
    grid = uniform_efficiency_grid(K, eta_max)
    tensor = build_response_tensor(grid, DetectorConfig(M, N))
    q = binned_distributions(truth, grid, M)
    counts = sample_counts(q, n_runs, seed, etas=grid.etas)
    result = reconstruct(to_frequencies(counts), tensor, rule, reference=truth)
    return RunArtifacts(truth, counts, result, grid)


def run_single(spec: ExperimentSpec) -> ReconstructionResult:
    """Simulate one experiment and write counts, summary, and traces."""
    spec.validate_single()
    artifacts = simulate_and_reconstruct(
        spec.state, spec.N, spec.K, spec.eta_max, spec.M,
        spec.n_runs, spec.seed, spec.stopping_rule(),
    )
    out = _prepare_out(spec)
    write_counts_csv(artifacts.counts, out / "counts.csv")
    _write_distribution_csv(out / "rho_final.csv", artifacts.result.rho_final,
                            truth=artifacts.truth)
    artifacts.result.save_traces_csv(out / "traces.csv")
    summary = {
        "spec": spec.to_dict(),
        "truth_tail_mass": artifacts.truth.tail_mass,
        **_result_summary(artifacts.result),
    }
    _write_json(out / "summary.json", summary)
    return artifacts.result


@dataclass(frozen=True)
class CellResult:
    """One sweep cell: fidelity statistics over replicas."""

    state: str
    mean: float
    M: int
    eta_max: float
    fidelities: tuple[float, ...] = ()
    error: str | None = None

    @property
    def g_mean(self) -> float:
        return float(np.mean(self.fidelities)) if self.fidelities else float("nan")

    @property
    def g_std(self) -> float:
        if len(self.fidelities) < 2:
            return float("nan")
        return float(np.std(self.fidelities, ddof=1))


@dataclass(frozen=True)
class SweepResult:
    cells: tuple[CellResult, ...]

    def ok_cells(self) -> list[CellResult]:
        return [c for c in self.cells if c.error is None]


def _sweep_replica(task) -> tuple[int, int, float | None, str | None]:
    """Worker for one (cell, replica); returns (cell_index, replica, G, error)."""
    (cell_index, replica, family, mean, M, eta_max, N, K, n_runs, seed, rule) = task
    try:
        state = StateSpec.for_mean(family, mean)
        artifacts = simulate_and_reconstruct(state, N, K, eta_max, M, n_runs, seed, rule)
        g = float(artifacts.result.fidelity_trace[-1])
        return cell_index, replica, g, None
    except Exception as exc:  # recorded, sweep continues
        return cell_index, replica, None, f"{type(exc).__name__}: {exc}"


def run_sweep(spec: ExperimentSpec, workers: int = 1) -> SweepResult:
    """Cartesian product over (state, mean, M, eta_max) with replica statistics."""
    spec.validate_sweep()
    rule = spec.stopping_rule()
    grid = list(product(spec.states, spec.means, _as_tuple(spec.M), _as_tuple(spec.eta_max)))
    tasks = []
    for cell_index, (family, mean, M, eta_max) in enumerate(grid):
        for replica in range(spec.replicas):
            seed = replica_seed(spec.seed, cell_index, replica)
            tasks.append((cell_index, replica, family, mean, M, eta_max,
                          spec.N, spec.K, spec.n_runs, seed, rule))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_replica, tasks, chunksize=1))
    else:
        outcomes = [_sweep_replica(t) for t in tasks]

    by_cell: dict[int, list] = {i: [] for i in range(len(grid))}
    for cell_index, replica, g, error in outcomes:
        by_cell[cell_index].append((replica, g, error))

    cells = []
    for cell_index, (family, mean, M, eta_max) in enumerate(grid):
        rows = sorted(by_cell[cell_index])
        errors = [e for _, _, e in rows if e is not None]
        if errors:
            cells.append(CellResult(family, mean, M, eta_max, error=errors[0]))
        else:
            cells.append(CellResult(family, mean, M, eta_max,
                                    fidelities=tuple(g for _, g, _ in rows)))
    result = SweepResult(tuple(cells))

    out = _prepare_out(spec)
    _write_sweep_csv(out / "sweep.csv", result.cells)
    for family in spec.states:
        for eta_max in _as_tuple(spec.eta_max):
            panel = [c for c in result.cells if c.state == family and c.eta_max == eta_max]
            _write_sweep_csv(out / f"sweep_{family}_eta{eta_max:g}.csv", panel)
    _write_json(out / "summary.json", {
        "spec": spec.to_dict(),
        "cells": len(result.cells),
        "failed_cells": sum(1 for c in result.cells if c.error is not None),
    })
    return result


def run_baseline_comparison(spec: ExperimentSpec) -> dict:
    """Least-squares inversion vs EM on the same simulated data."""
    spec.validate_single()
    artifacts = simulate_and_reconstruct(
        spec.state, spec.N, spec.K, spec.eta_max, spec.M,
        spec.n_runs, spec.seed, spec.stopping_rule(),
    )
    tensor = build_response_tensor(artifacts.grid, DetectorConfig(spec.M, spec.N))
    freqs = to_frequencies(artifacts.counts)
    baseline = linear_inversion_baseline(freqs, tensor)
    truth = artifacts.truth.probs
    em = artifacts.result.rho_final.probs
    report = {
        "spec": spec.to_dict(),
        "l1_em": float(np.abs(em - truth).sum()),
        "l1_baseline": float(np.abs(baseline - truth).sum()),
        "baseline_min_entry": float(baseline.min()),
        "baseline_negative_entries": int((baseline < 0).sum()),
        "baseline_negativity_mass": float(np.abs(baseline[baseline < 0]).sum()),
        "em_iterations": artifacts.result.iterations_run,
    }
    out = _prepare_out(spec)
    with (out / "baseline.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "rho_true", "rho_em", "rho_lstsq"])
        for n in range(spec.N + 1):
            writer.writerow([n, repr(float(truth[n])), repr(float(em[n])), repr(float(baseline[n]))])
    _write_json(out / "baseline.json", report)
    return report


def run_reconstruction(
    counts: OutcomeCounts,
    N: int,
    rule: StoppingRule,
    reference: PhotonDistribution | None = None,
    out_dir=None,
    name: str = "reconstruction",
) -> ReconstructionResult:
    """Reconstruct from externally supplied counts (simulated or ingested)."""
    if counts.etas is None:
        raise SpecValidationError("counts carry no efficiency labels")
    if counts.M > N:
        raise SpecValidationError(f"counting capability M={counts.M} exceeds N={N}")
    grid = EfficiencyGrid(counts.etas)
    tensor = build_response_tensor(grid, DetectorConfig(counts.M, N))
    result = reconstruct(to_frequencies(counts), tensor, rule, reference=reference)
    if out_dir is not None:
        out = Path(out_dir) / name
        out.mkdir(parents=True, exist_ok=True)
        _write_distribution_csv(out / "rho_final.csv", result.rho_final, truth=reference)
        result.save_traces_csv(out / "traces.csv")
        _write_json(out / "summary.json", {
            "name": name, "N": N, "K": counts.K, "M": counts.M,
            "n_runs": counts.runs_per_eta,
            **_result_summary(result),
        })
    return result


def run_ingest(
    spectra_dir,
    manifest_path,
    M: int,
    num_peaks: int | None = None,
    out_dir=None,
    name: str = "ingest",
) -> tuple[OutcomeCounts, PeakModel]:
    """Ingest a directory of per-efficiency spectra listed in a manifest CSV.

    The manifest has header ``file,eta``; file paths are relative to the
    spectra directory. Emits the same (nu, eta, m, count) CSV as the sampler.
    """
    spectra_dir = Path(spectra_dir)
    manifest_path = Path(manifest_path)
    entries = []
    with manifest_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"file", "eta"}.issubset(reader.fieldnames):
            raise SpecValidationError(f"{manifest_path}: manifest needs columns file,eta")
        for row in reader:
            entries.append((row["file"], float(row["eta"])))
    if not entries:
        raise SpecValidationError(f"{manifest_path}: manifest lists no spectra")
    histograms = [load_spectrum(spectra_dir / fname, eta) for fname, eta in entries]
    counts, model = ingest_spectra(histograms, M, num_peaks=num_peaks)
    if out_dir is not None:
        out = Path(out_dir) / name
        out.mkdir(parents=True, exist_ok=True)
        write_counts_csv(counts, out / "counts.csv")
        _write_json(out / "peaks.json", {
            "peaks": [{"amplitude": a, "center": c, "width": w} for a, c, w in model.peaks],
            "reduced_chisq": model.reduced_chisq,
            "residual_warning": model.residual_warning,
        })
    return counts, model


def _result_summary(result: ReconstructionResult) -> dict:
    summary = {
        "iterations_run": result.iterations_run,
        "stop_reason": result.stop_reason,
        "converged_at": result.converged_at,
        "final_epsilon": float(result.epsilon_trace[-1]),
        "final_loglik": float(result.loglik_trace[-1]),
    }
    if result.fidelity_trace is not None:
        summary["final_fidelity"] = float(result.fidelity_trace[-1])
    return summary


def _prepare_out(spec: ExperimentSpec) -> Path:
    out = Path(spec.out_dir) / spec.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_distribution_csv(path: Path, dist: PhotonDistribution,
                            truth: PhotonDistribution | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        if truth is not None:
            writer.writerow(["n", "rho_true", "rho_reconstructed"])
            for n, (t, r) in enumerate(zip(truth.probs, dist.probs)):
                writer.writerow([n, repr(float(t)), repr(float(r))])
        else:
            writer.writerow(["n", "rho_reconstructed"])
            for n, r in enumerate(dist.probs):
                writer.writerow([n, repr(float(r))])


def _write_sweep_csv(path: Path, cells: list[CellResult]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state", "eta_max", "mean", "M", "g_mean", "g_std", "replicas", "error"])
        for c in cells:
            writer.writerow([
                c.state, repr(c.eta_max), repr(c.mean), c.M,
                "" if c.error else repr(c.g_mean),
                "" if c.error else repr(c.g_std),
                len(c.fidelities), c.error or "",
            ])
