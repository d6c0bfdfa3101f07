"""Command-line interface.

Exit codes: 0 success, 1 validation/config error, 2 runtime or fit failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ExperimentSpec,
    SpecValidationError,
    StateSpec,
    run_baseline_comparison,
    run_ingest,
    run_reconstruction,
    run_single,
    run_sweep,
)
from .ingest import PeakFitError
from .recon import ModelInconsistencyError, RankDeficiencyError
from .sampler import read_counts_csv


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="JSON experiment description")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--threads", type=int, default=1, help="parallel workers for sweeps")


def _load_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.from_json(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        config = spec.to_dict()
        config.update(overrides)
        spec = ExperimentSpec.from_dict(config)
    return spec


def _cmd_simulate(args) -> int:
    result = run_single(_load_spec(args))
    print(f"simulate: {result.iterations_run} iterations, stop reason {result.stop_reason}")
    return 0


def _cmd_sweep(args) -> int:
    result = run_sweep(_load_spec(args), workers=args.threads)
    failed = sum(1 for c in result.cells if c.error is not None)
    print(f"sweep: {len(result.cells)} cells, {failed} failed")
    return 0


def _cmd_baseline(args) -> int:
    report = run_baseline_comparison(_load_spec(args))
    print(
        "baseline: L1(EM)={l1_em:.4g} L1(lstsq)={l1_baseline:.4g} "
        "negative entries={baseline_negative_entries}".format(**report)
    )
    return 0


def _cmd_reconstruct(args) -> int:
    spec = _load_spec(args)
    config = json.loads(Path(args.config).read_text())
    counts_path = args.counts or config.get("counts")
    if counts_path is None:
        raise SpecValidationError("reconstruct needs --counts or a 'counts' config entry")
    counts = read_counts_csv(counts_path)
    reference = spec.state.build(spec.N) if spec.state is not None else None
    result = run_reconstruction(
        counts, spec.N, spec.stopping_rule(),
        reference=reference, out_dir=spec.out_dir, name=spec.name,
    )
    print(f"reconstruct: {result.iterations_run} iterations, stop reason {result.stop_reason}")
    return 0


def _cmd_ingest(args) -> int:
    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text())
    spectra_dir = args.spectra or config.get("spectra_dir")
    manifest = args.manifest or config.get("manifest")
    M = args.M if args.M is not None else config.get("M")
    if spectra_dir is None or manifest is None or M is None:
        raise SpecValidationError("ingest needs --spectra, --manifest and --M (or config entries)")
    num_peaks = args.num_peaks if args.num_peaks is not None else config.get("num_peaks")
    out_dir = args.out or config.get("out_dir", "out")
    name = config.get("name", "ingest")
    counts, model = run_ingest(spectra_dir, manifest, int(M), num_peaks=num_peaks,
                               out_dir=out_dir, name=name)
    flag = " (residual warning)" if model.residual_warning else ""
    print(f"ingest: {counts.K} spectra -> outcomes 0..{counts.M}{flag}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="photonem",
        description="Photon-number statistics from multi-efficiency counting data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one simulated reconstruction")
    _add_common(p)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("sweep", help="fidelity sweep over states x mean x M x eta_max")
    _add_common(p)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("reconstruct", help="reconstruct from a (nu,eta,m,count) CSV")
    _add_common(p)
    p.add_argument("--counts", default=None, help="counts CSV path")
    p.set_defaults(fn=_cmd_reconstruct)

    p = sub.add_parser("ingest", help="pulse-height spectra -> counts CSV")
    _add_common(p, config_required=False)
    p.add_argument("--spectra", default=None, help="directory holding spectrum files")
    p.add_argument("--manifest", default=None, help="CSV with columns file,eta")
    p.add_argument("--M", type=int, default=None, help="counting capability")
    p.add_argument("--num-peaks", type=int, default=None, dest="num_peaks",
                   help="photoelectron peaks to fit (default M+1)")
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("baseline", help="compare EM against direct least-squares inversion")
    _add_common(p)
    p.set_defaults(fn=_cmd_baseline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (PeakFitError, ModelInconsistencyError, RankDeficiencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SpecValidationError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
