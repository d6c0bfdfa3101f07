"""Turn detector pulse-height (charge) spectra into outcome counts.

The photoelectron peaks of a charge spectrum are located and fitted with a sum
of Gaussians; outcome thresholds are placed halfway between adjacent fitted
peak centers, and each spectrum is binned into outcomes 0..M with everything
above the top threshold landing in the overflow bin.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import curve_fit
from scipy.signal import find_peaks

from .detector import detection_distribution
from .sampler import OutcomeCounts, multinomial_draw
from .states import PhotonDistribution


class PeakFitError(RuntimeError):
    """Peak location or Gaussian fitting failed."""


@dataclass(frozen=True)
class ChargeHistogram:
    """Histogrammed charge spectrum recorded at one efficiency setting."""

    bin_edges: np.ndarray
    counts: np.ndarray
    eta_label: float

    def __post_init__(self):
        edges = np.array(self.bin_edges, dtype=float)
        counts = np.array(self.counts, dtype=np.int64)
        if edges.ndim != 1 or edges.size < 2:
            raise ValueError("need at least two bin edges")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if counts.shape != (edges.size - 1,):
            raise ValueError("need one count per bin")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        edges.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class PeakModel:
    """Fitted photoelectron peaks as (amplitude, center, width) triples.

    ``residual_warning`` flags fits whose residuals are poor or whose peaks
    overlap (separation below the fitted widths); such threshold placement is
    still usable but less trustworthy.
    """

    peaks: tuple[tuple[float, float, float], ...]
    reduced_chisq: float = float("nan")
    residual_warning: bool = False

    def __post_init__(self):
        if not self.peaks:
            raise ValueError("need at least one peak")
        for amp, _, width in self.peaks:
            if amp < 0:
                raise ValueError("amplitudes must be nonnegative")
            if width <= 0:
                raise ValueError("widths must be positive")
        centers = [c for _, c, _ in self.peaks]
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise ValueError("peak centers must be strictly increasing")

    @property
    def centers(self) -> np.ndarray:
        return np.array([c for _, c, _ in self.peaks])


@dataclass(frozen=True)
class ThresholdSet:
    """Strictly increasing charge thresholds separating outcomes."""

    thresholds: np.ndarray

    def __post_init__(self):
        t = np.array(self.thresholds, dtype=float)
        if t.ndim != 1 or t.size < 1:
            raise ValueError("need at least one threshold")
        if np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "thresholds", t)

    def first(self, M: int) -> "ThresholdSet":
        if M > self.thresholds.size:
            raise ValueError(f"only {self.thresholds.size} thresholds available, need {M}")
        return ThresholdSet(self.thresholds[:M])


def _gaussian_sum(x, *params):
    y = np.zeros_like(x)
    for i in range(0, len(params), 3):
        amp, center, width = params[i : i + 3]
        y = y + amp * np.exp(-0.5 * ((x - center) / width) ** 2)
    return y


def fit_gaussian_peaks(
    hist: ChargeHistogram,
    num_peaks: int,
    smoothing_sigma: float | None = None,
    min_rel_height: float = 1e-3,
) -> PeakModel:
    """Least-squares fit of a sum of ``num_peaks`` Gaussians to the spectrum.

    Initial centers come from the highest local maxima of the smoothed counts,
    initial widths from half the minimum center spacing; the fit is weighted by
    Poisson errors sqrt(max(counts, 1)) and bounded so each center stays within
    half a spacing of its initializer.
    """
    if num_peaks < 1:
        raise ValueError("num_peaks must be >= 1")
    x = hist.bin_centers
    y = hist.counts.astype(float)
    if smoothing_sigma is None:
        smoothing_sigma = max(2, x.size // 100)
    smooth = gaussian_filter1d(y, smoothing_sigma)
    candidates, _ = find_peaks(smooth, height=smooth.max() * min_rel_height)
    if candidates.size < num_peaks:
        raise PeakFitError(
            f"found {candidates.size} local maxima after smoothing, need {num_peaks}"
        )
    chosen = np.sort(candidates[np.argsort(smooth[candidates])[::-1][:num_peaks]])
    c0 = x[chosen]
    a0 = np.maximum(smooth[chosen], 1.0)
    bin_width = float(np.median(np.diff(hist.bin_edges)))
    if num_peaks == 1:
        total = max(y.sum(), 1.0)
        mu = float((x * y).sum() / total)
        var = float((((x - mu) ** 2) * y).sum() / total)
        half_gap = max(np.sqrt(var), bin_width)
        center_slack = x[-1] - x[0]
    else:
        half_gap = 0.5 * float(np.diff(c0).min())
        center_slack = half_gap
    w0 = np.full(num_peaks, half_gap)

    p0 = np.ravel(np.column_stack([a0, c0, w0]))
    lower = np.ravel(np.column_stack([np.zeros(num_peaks), c0 - center_slack, np.full(num_peaks, 0.5 * bin_width)]))
    upper = np.ravel(np.column_stack([np.full(num_peaks, 2.0 * max(y.max(), 1.0)), c0 + center_slack, np.full(num_peaks, 2.0 * half_gap)]))
    p0 = np.clip(p0, lower, upper)
    sigma = np.sqrt(np.clip(y, 1.0, None))
    try:
        popt, _ = curve_fit(
            _gaussian_sum, x, y, p0=p0, sigma=sigma, bounds=(lower, upper), maxfev=20000
        )
    except RuntimeError as exc:
        raise PeakFitError(f"Gaussian peak fit did not converge: {exc}") from exc

    triples = sorted(
        (tuple(float(v) for v in popt[i : i + 3]) for i in range(0, len(popt), 3)),
        key=lambda t: t[1],
    )
    centers = np.array([c for _, c, _ in triples])
    widths = np.array([w for _, _, w in triples])
    if np.any(np.diff(centers) <= 0):
        raise PeakFitError("fit collapsed two peaks onto the same center")
    residuals = (y - _gaussian_sum(x, *popt)) / sigma
    dof = max(x.size - 3 * num_peaks, 1)
    reduced_chisq = float((residuals**2).sum() / dof)
    overlap = num_peaks > 1 and float(np.diff(centers).min()) < float(widths.max())
    return PeakModel(tuple(triples), reduced_chisq, overlap or reduced_chisq > 2.0)


def midpoint_thresholds(model: PeakModel) -> ThresholdSet:
    """Thresholds halfway between adjacent fitted peak centers."""
    centers = model.centers
    if centers.size < 2:
        raise ValueError("need at least two peaks to place thresholds")
    return ThresholdSet(0.5 * (centers[:-1] + centers[1:]))


def bin_by_thresholds(hist: ChargeHistogram, thresholds: ThresholdSet, M: int) -> np.ndarray:
    """Bin a spectrum into outcomes 0..M using M charge thresholds.

    Outcome m collects the histogram mass in (t_m, t_{m+1}] with t_0 = -inf and
    t_{M+1} = +inf. A threshold falling inside a histogram bin splits that bin
    proportionally to width; fractional masses are turned back into integers by
    rounding the cumulative mass at each threshold (half-up), which preserves
    the total count exactly.
    """
    if thresholds.thresholds.size != M:
        raise ValueError(f"need exactly M={M} thresholds, got {thresholds.thresholds.size}")
    edges = hist.bin_edges
    counts = hist.counts.astype(float)
    cumulative = np.concatenate([[0.0], np.cumsum(counts)])

    def mass_below(t: float) -> float:
        if t <= edges[0]:
            return 0.0
        if t >= edges[-1]:
            return float(cumulative[-1])
        i = int(np.searchsorted(edges, t, side="right")) - 1
        frac = (t - edges[i]) / (edges[i + 1] - edges[i])
        return float(cumulative[i] + counts[i] * frac)

    cuts = [0.0] + [mass_below(t) for t in thresholds.thresholds] + [float(cumulative[-1])]
    rounded = np.floor(np.asarray(cuts) + 0.5).astype(np.int64)
    rounded[0] = 0
    rounded[-1] = hist.total
    return np.diff(rounded)


def synthesize_spectrum(
    rho: PhotonDistribution,
    eta: float,
    gain: float,
    noise_width: float,
    n_runs: int,
    seed,
) -> ChargeHistogram:
    """Simulated charge spectrum: detected count m becomes charge m*gain plus noise."""
    if gain <= 0:
        raise ValueError("gain must be positive")
    if noise_width <= 0:
        raise ValueError("noise_width must be positive")
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    p = detection_distribution(rho, eta)
    rng = np.random.default_rng(seed)
    counts_per_m = multinomial_draw(rng, n_runs, p)
    parts = []
    for m, c in enumerate(counts_per_m):
        if c > 0:
            parts.append(rng.normal(m * gain, noise_width, int(c)))
    charges = np.concatenate(parts)
    width = noise_width / 5.0
    lo = -5.0 * noise_width
    hi = float(charges.max()) + 5.0 * noise_width
    edges = np.arange(lo, hi + width, width)
    counts, _ = np.histogram(charges, edges)
    return ChargeHistogram(edges, counts, eta)


def load_spectrum(path, eta: float) -> ChargeHistogram:
    """Read a spectrum file: either (charge, count) columns or one raw charge per line."""
    data = np.loadtxt(path, dtype=float)
    if data.ndim == 1 or data.shape[1] == 1:
        charges = data.reshape(-1)
        if charges.size < 2:
            raise ValueError(f"{path}: need at least two samples")
        counts, edges = np.histogram(charges, bins="auto")
        return ChargeHistogram(edges, counts, eta)
    if data.shape[1] == 2:
        centers, counts = data[:, 0], data[:, 1]
        if np.any(np.diff(centers) <= 0):
            raise ValueError(f"{path}: charge column must be strictly increasing")
        inner = 0.5 * (centers[:-1] + centers[1:])
        first = centers[0] - (inner[0] - centers[0])
        last = centers[-1] + (centers[-1] - inner[-1])
        edges = np.concatenate([[first], inner, [last]])
        return ChargeHistogram(edges, np.rint(counts).astype(np.int64), eta)
    raise ValueError(f"{path}: expected 1 or 2 numeric columns, got {data.shape[1]}")


def ingest_spectra(
    histograms: list[ChargeHistogram],
    M: int,
    num_peaks: int | None = None,
) -> tuple[OutcomeCounts, PeakModel]:
    """Convert one spectrum per efficiency into outcome counts.

    The peak model is fitted on the highest-efficiency spectrum, where the
    photoelectron peaks are best populated, and the derived thresholds are
    applied to all spectra (the charge scale of the detector does not depend on
    the filter transmission in front of it). All spectra must contain the same
    total number of pulses.
    """
    if not histograms:
        raise ValueError("need at least one spectrum")
    if M < 1:
        raise ValueError("counting capability M must be >= 1")
    if num_peaks is None:
        num_peaks = M + 1
    if num_peaks < M + 1:
        raise ValueError(f"need at least M+1={M + 1} peaks to place {M} thresholds")
    ordered = sorted(histograms, key=lambda h: h.eta_label)
    etas = np.array([h.eta_label for h in ordered])
    if np.any(np.diff(etas) <= 0):
        raise ValueError("spectra must carry distinct efficiency labels")
    model = fit_gaussian_peaks(ordered[-1], num_peaks)
    thresholds = midpoint_thresholds(model).first(M)
    rows = [bin_by_thresholds(h, thresholds, M) for h in ordered]
    totals = {int(r.sum()) for r in rows}
    if len(totals) != 1:
        raise ValueError(
            f"equal pulse totals per efficiency are required, got {sorted(totals)}; "
            "truncate or subsample the spectra to a common size first"
        )
    counts = OutcomeCounts(np.vstack(rows), totals.pop(), etas=etas)
    return counts, model
