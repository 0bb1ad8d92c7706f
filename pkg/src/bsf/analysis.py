"""Post-training analyses: learning-curve ripple statistics and filter usage.

The ripple of a validation-error curve is the residual around a smoothed
baseline: a quadratic Savitzky-Golay fit with window 51 in the interior and a
symmetric window shrunk to fit near the edges.  Residuals are quantized into
100 uniform bins over their range and summarized by mean, standard deviation,
and maximum of the bin centers.

Filter usage reports, for each separable-mode conv layer, how often each of
the 2^(2d-1) table codes occurs, plus the Pearson correlations between the
per-layer histograms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import savgol_filter

from .layers import MODE_FULL
from .modelio import ConvEntry, ModelFile

SG_WINDOW = 51
SG_ORDER = 2
RIPPLE_BINS = 100


def savgol_baseline(series: np.ndarray, window: int = SG_WINDOW, order: int = SG_ORDER) -> np.ndarray:
    """Least-squares polynomial smoothing with symmetric windows everywhere.

    Interior points use the full window; the first and last window//2 points
    are refit with the largest symmetric window that stays in bounds (order
    capped by the window size), so the baseline reproduces polynomials up to
    `order` exactly at every index.
    """
    series = np.asarray(series, dtype=np.float64)
    n = len(series)
    if n <= window:
        raise ValueError(f"series length {n} must exceed the window {window}")
    baseline = savgol_filter(series, window, order, mode="interp")
    half = window // 2
    for i in range(half):
        for j in (i, n - 1 - i):
            k = min(j, n - 1 - j)
            lo, hi = j - k, j + k + 1
            deg = min(order, hi - lo - 1)
            if deg == 0:
                baseline[j] = series[j]
            else:
                coeffs = np.polynomial.polynomial.polyfit(
                    np.arange(lo, hi, dtype=np.float64), series[lo:hi], deg
                )
                baseline[j] = np.polynomial.polynomial.polyval(float(j), coeffs)
    return baseline


def quantize_ripple(ripple: np.ndarray, bins: int = RIPPLE_BINS) -> np.ndarray:
    """Snap residuals to the centers of `bins` uniform bins over their range."""
    ripple = np.asarray(ripple, dtype=np.float64)
    lo = ripple.min()
    hi = ripple.max()
    if hi == lo:
        return np.zeros_like(ripple) + lo
    width = (hi - lo) / bins
    idx = np.clip(((ripple - lo) / width).astype(int), 0, bins - 1)
    return lo + (idx + 0.5) * width


@dataclass
class RippleStats:
    mean: float
    std: float
    max: float


def ripple_stats(
    series, window: int = SG_WINDOW, order: int = SG_ORDER, bins: int = RIPPLE_BINS
) -> RippleStats:
    """Mean/std/max of the quantized residual around the smoothed baseline."""
    series = np.asarray(series, dtype=np.float64)
    ripple = series - savgol_baseline(series, window, order)
    # rounding residue from the polynomial fits is not ripple
    ripple[np.abs(ripple) < 1e-12 * max(1.0, np.abs(series).max())] = 0.0
    q = quantize_ripple(ripple, bins)
    return RippleStats(mean=float(q.mean()), std=float(q.std()), max=float(q.max()))


@dataclass
class LayerHistogram:
    layer: str
    counts: np.ndarray  # one bin per separable-filter code

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def filter_histograms(model: ModelFile) -> tuple[list[LayerHistogram], list[str]]:
    """Code-usage histograms for separable conv layers; others listed as skipped."""
    hists: list[LayerHistogram] = []
    skipped: list[str] = []
    conv_idx = 0
    for entry in model.entries:
        if not isinstance(entry, ConvEntry):
            continue
        conv_idx += 1
        name = f"conv{conv_idx}"
        if entry.mode == MODE_FULL:
            skipped.append(name)
            continue
        k = 1 << (2 * entry.side - 1)
        counts = np.bincount(entry.codes, minlength=k)
        hists.append(LayerHistogram(layer=name, counts=counts))
    return hists, skipped


def pearson_matrix(hists: list[LayerHistogram]) -> np.ndarray:
    """Pairwise Pearson correlations between layer histograms.

    A histogram with zero variance has no defined correlation with anything;
    those off-diagonal entries are reported as 0.0 (diagonal stays 1.0).
    """
    n = len(hists)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            a = hists[i].counts.astype(np.float64)
            b = hists[j].counts.astype(np.float64)
            sa = a.std()
            sb = b.std()
            if sa == 0.0 or sb == 0.0:
                r = 0.0
            else:
                r = float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))
            out[i, j] = out[j, i] = r
    return out


def analyze_model(model: ModelFile, top: int = 4) -> dict:
    """Full filter-usage report for a stored model."""
    hists, skipped = filter_histograms(model)
    sides = [e.side for e in model.entries if isinstance(e, ConvEntry) and e.mode != MODE_FULL]
    report: dict = {"layers": [], "skipped_full_binary": skipped}
    for h in hists:
        ranked = np.argsort(-h.counts, kind="stable")[:top]
        report["layers"].append(
            {
                "layer": h.layer,
                "counts": h.counts.tolist(),
                "total": h.total,
                "top_codes": ranked.tolist(),
                "top_counts": h.counts[ranked].tolist(),
            }
        )
    if hists and sides:
        d = sides[0]
        all_pos = (1 << (2 * d - 1)) - 1  # u and v all +1
        all_neg_v = all_pos ^ ((1 << d) - 1)  # canonical all-negative: v flipped
        flat = {
            "all_positive_code": all_pos,
            "all_negative_code": all_neg_v,
            "flat_codes_in_top": [
                bool(set([all_pos, all_neg_v]) & set(layer["top_codes"]))
                for layer in report["layers"]
            ],
        }
        report.update(flat)
        report["pearson"] = pearson_matrix(hists).tolist()
    return report
