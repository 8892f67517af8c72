"""Power-law structure of saliency sweeps.

A sweep traces converged density against the pruning threshold. Over the
compression range the relationship is a power law, ln(density) =
ln(c) - alpha0 * ln(threshold), flanked by a plateau where the threshold
is too small to bite (region 1) and a collapse where accuracy gives out
(region 3). Region boundaries are structural: the collapse suffix is
found by an accuracy cutoff, and region 2 is the window where a log-log
line fits best.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .saliency import SaliencySeries, SeriesPoint


class FitError(Exception):
    pass


def _as_xy(points) -> tuple:
    pairs = [(float(s), float(d)) for s, d in points]
    if len(pairs) < 2:
        raise FitError("a log-log fit needs at least two points")
    for s, d in pairs:
        if s <= 0 or d <= 0:
            raise FitError(f"log undefined for point ({s}, {d})")
    x = np.log([s for s, _ in pairs])
    y = np.log([d for _, d in pairs])
    return x, y


def loglog_fit(points: Sequence) -> tuple:
    """Least squares of ln(density) on ln(saliency).

    Returns (ln_c, alpha0, r_squared) for the model
    ln(density) = ln_c - alpha0 * ln(saliency). A series with zero
    residual variance fits perfectly, so r_squared is 1 by convention
    when the targets are all equal.
    """
    x, y = _as_xy(points)
    x_mean, y_mean = x.mean(), y.mean()
    sxx = float(((x - x_mean) ** 2).sum())
    if sxx == 0.0:
        raise FitError("all saliencies equal; slope undefined")
    sxy = float(((x - x_mean) * (y - y_mean)).sum())
    slope = sxy / sxx
    intercept = y_mean - slope * x_mean
    predicted = intercept + slope * x
    ss_res = float(((y - predicted) ** 2).sum())
    ss_tot = float(((y - y_mean) ** 2).sum())
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return intercept, -slope, r_squared


# Two r-squared values within this of each other count as a tie, broken
# toward the longer and then the earlier window. Keeps an exactly
# power-law series from losing its full span to float dust.
R2_TIE = 1e-9


@dataclass
class Segmentation:
    """Region labels for a series sorted by threshold.

    labels[i] is 1, 2, or 3. region2_span is a half-open (start, stop)
    index pair into the sorted points, or None when no window fit well
    enough. points holds the sorted series for self-containment.
    """

    points: tuple
    labels: tuple
    region2_span: tuple | None
    found: bool


def segment_regions(series: SaliencySeries, dense_accuracy: float,
                    eps_acc: float = 1.0, min_len: int = 4,
                    r2_floor: float = 0.9) -> Segmentation:
    """Split a sweep into plateau, power-law window, and collapse.

    eps_acc is in accuracy percentage points: a point collapses when its
    accuracy falls more than eps_acc points below dense_accuracy (which is
    a fraction). The collapse region is the maximal such suffix. Within
    the rest, every window of at least min_len points is fit and the best
    r-squared wins; if even the best is below r2_floor the series has no
    power-law region and every non-collapsed point is labeled 1. Points
    trailing the chosen window join region 3: past the law's edge the
    sweep is already on its way down.
    """
    if min_len < 2:
        raise FitError("min_len must be at least 2")
    pts = tuple(sorted(series.points, key=lambda p: p.threshold))
    n = len(pts)
    if n == 0:
        raise FitError("empty series")
    cutoff = dense_accuracy - eps_acc / 100.0
    collapse_start = n
    while collapse_start > 0 and pts[collapse_start - 1].accuracy < cutoff:
        collapse_start -= 1

    best = None  # (r2, start, stop)
    for start in range(0, collapse_start):
        for stop in range(start + min_len, collapse_start + 1):
            window = pts[start:stop]
            if any(p.threshold <= 0 or p.density <= 0 for p in window):
                continue
            try:
                _, _, r2 = loglog_fit([(p.threshold, p.density) for p in window])
            except FitError:
                continue
            if best is None:
                best = (r2, start, stop)
                continue
            b_r2, b_start, b_stop = best
            if r2 > b_r2 + R2_TIE:
                best = (r2, start, stop)
            elif r2 > b_r2 - R2_TIE:
                if (stop - start, -start) > (b_stop - b_start, -b_start):
                    best = (r2, start, stop)

    if best is None or best[0] < r2_floor:
        labels = tuple(1 if i < collapse_start else 3 for i in range(n))
        return Segmentation(points=pts, labels=labels, region2_span=None,
                            found=False)
    _, start, stop = best
    labels = []
    for i in range(n):
        if i < start:
            labels.append(1)
        elif i < stop:
            labels.append(2)
        else:
            labels.append(3)
    return Segmentation(points=pts, labels=tuple(labels),
                        region2_span=(start, stop), found=True)


@dataclass
class PowerLawFit:
    """A fitted compression law plus the segmentation it came from."""

    ln_c: float
    alpha0: float
    r_squared: float
    region2_span: tuple
    labels: tuple
    points: tuple

    @property
    def c(self) -> float:
        return math.exp(self.ln_c)

    def predicted_ln_density(self, threshold: float) -> float:
        if threshold <= 0:
            raise FitError("threshold must be positive")
        return self.ln_c - self.alpha0 * math.log(threshold)


def fit_power_law(series: SaliencySeries, dense_accuracy: float,
                  eps_acc: float = 1.0, min_len: int = 4,
                  r2_floor: float = 0.9):
    """Segment a series and fit the law on its region 2.

    Returns a PowerLawFit, or the bare Segmentation when no region
    qualifies; callers can distinguish by the ``found`` attribute on the
    latter.
    """
    seg = segment_regions(series, dense_accuracy, eps_acc=eps_acc,
                          min_len=min_len, r2_floor=r2_floor)
    if not seg.found:
        return seg
    start, stop = seg.region2_span
    window = seg.points[start:stop]
    ln_c, alpha0, r2 = loglog_fit([(p.threshold, p.density) for p in window])
    return PowerLawFit(ln_c=ln_c, alpha0=alpha0, r_squared=r2,
                       region2_span=seg.region2_span, labels=seg.labels,
                       points=seg.points)


REPORT_CSV_COLUMNS = ("ln_saliency", "ln_density", "region")


def fit_report(fit: PowerLawFit) -> str:
    """Human-readable summary: constants, spans, per-point residuals."""
    start, stop = fit.region2_span
    lines = [
        f"power law: ln(density) = {fit.ln_c:.6f} - {fit.alpha0:.6f} * ln(threshold)",
        f"c = {fit.c:.6f}, alpha0 = {fit.alpha0:.6f}, r2 = {fit.r_squared:.6f}",
        f"region 2 spans sorted points [{start}, {stop}) "
        f"of {len(fit.points)} total",
        "  idx  region  threshold     density    residual",
    ]
    for i, (p, label) in enumerate(zip(fit.points, fit.labels)):
        residual = math.log(p.density) - fit.predicted_ln_density(p.threshold)
        lines.append(
            f"  {i:3d}  {label:6d}  {p.threshold:<12.6g} {p.density:<10.6g} "
            f"{residual:+.3e}"
        )
    return "\n".join(lines)


def write_report_csv(path, fit: PowerLawFit) -> None:
    """Labeled log-log points; floats use repr so they round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_CSV_COLUMNS)
        for p, label in zip(fit.points, fit.labels):
            writer.writerow((repr(math.log(p.threshold)),
                             repr(math.log(p.density)), label))


def exact_law_series(ln_c: float, alpha0: float, thresholds: Sequence[float],
                     accuracy: float = 0.97, method: str = "hyperflux") -> SaliencySeries:
    """Fixture helper: a series lying exactly on a law, constant accuracy."""
    points = []
    for i, s in enumerate(thresholds):
        density = math.exp(ln_c - alpha0 * math.log(s))
        points.append(SeriesPoint(threshold=float(s), density=density,
                                  accuracy=accuracy, epoch=i + 1))
    return SaliencySeries(method=method, points=tuple(points))
