"""Reconstruction of photon-number statistics from low-performance counters.

Simulates lossy, finite-resolution photon counting over a grid of quantum
efficiencies, recovers the underlying photon-number distribution with an EM
inversion, and ingests real pulse-height spectra into the same pipeline.
"""

from .detector import (
    BinnedDistribution,
    DetectorConfig,
    EfficiencyGrid,
    ResponseTensor,
    bin_outcomes,
    binned_distributions,
    binomial_response,
    build_response_tensor,
    detection_distribution,
    outcome_probabilities,
    response_matrix,
    uniform_efficiency_grid,
)
from .harness import (
    CellResult,
    ExperimentSpec,
    SpecValidationError,
    StateSpec,
    SweepResult,
    run_baseline_comparison,
    run_ingest,
    run_reconstruction,
    run_single,
    run_sweep,
    simulate_and_reconstruct,
)
from .ingest import (
    ChargeHistogram,
    PeakFitError,
    PeakModel,
    ThresholdSet,
    bin_by_thresholds,
    fit_gaussian_peaks,
    ingest_spectra,
    load_spectrum,
    midpoint_thresholds,
    synthesize_spectrum,
)
from .recon import (
    ModelInconsistencyError,
    RankDeficiencyError,
    ReconstructionResult,
    StoppingRule,
    em_step,
    fidelity,
    linear_inversion_baseline,
    log_likelihood,
    reconstruct,
    total_absolute_error,
)
from .sampler import (
    OutcomeCounts,
    OutcomeFrequencies,
    exact_frequencies,
    read_counts_csv,
    sample_counts,
    to_frequencies,
    write_counts_csv,
)
from .states import (
    PhotonDistribution,
    coherent_distribution,
    custom_distribution,
    fock_distribution,
    fock_superposition_distribution,
    thermal_distribution,
)

__version__ = "0.1.0"
