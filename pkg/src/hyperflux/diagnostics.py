"""Verification instruments for presence-parameter dynamics.

Two independent ways of checking that the flux machinery does what the
gradient algebra says it does:

* FluxTracker records, per update step, the presence gradient of every
  weight together with the pressure it was fighting and the topology in
  force. Replaying the log yields pruned/active intervals, and for every
  interval that ended in a flip the mean flux must sit on the right side
  of the mean pressure. This is exact when the presence parameters are
  updated by plain SGD with a constant learning rate, because the update
  telescopes: the total movement of t is the learning rate times the sum
  of (G - gamma/d).

* Loss-difference oracles re-evaluate the network with one effective
  weight overridden, giving the true loss change a first-order flux
  estimate is approximating. The gap between truth and estimate shrinks
  quadratically as the restored weight is scaled down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import MaskedNet, masked_forward_loss


class FluxTracker:
    """Per-step log of presence gradients, pressure, and topology."""

    def __init__(self, d: int):
        if d <= 0:
            raise ValueError("d must be positive")
        self.d = d
        self.flux: list[np.ndarray] = []       # G per step, flattened to (d,)
        self.pressure: list[float] = []        # gamma / d per step
        self.topology: list[np.ndarray] = []   # mask in force during the step
        self._final_topology: np.ndarray | None = None

    def log_step(self, flux_flat: np.ndarray, pressure_per_element: float,
                 topology_flat: np.ndarray) -> None:
        flux_flat = np.asarray(flux_flat, dtype=np.float64)
        topology_flat = np.asarray(topology_flat, dtype=np.uint8)
        if flux_flat.shape != (self.d,) or topology_flat.shape != (self.d,):
            raise ValueError("step log shapes must be (d,)")
        self.flux.append(flux_flat.copy())
        self.pressure.append(float(pressure_per_element))
        self.topology.append(topology_flat.copy())
        self._final_topology = None

    def finalize(self, final_topology_flat: np.ndarray) -> None:
        """Record the topology after the last update, closing open intervals."""
        self._final_topology = np.asarray(final_topology_flat, dtype=np.uint8).copy()

    @property
    def steps(self) -> int:
        return len(self.flux)


@dataclass
class PhaseInterval:
    """A maximal run of steps a weight spent in one state."""

    weight: int
    start: int            # first step index, inclusive
    end: int              # last step index, inclusive
    pruned: bool          # state during the interval
    flipped: bool         # True if the interval ended with a state change
    mean_flux: float
    mean_pressure: float

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def extract_intervals(tracker: FluxTracker) -> list:
    """Replay the topology log into per-weight intervals.

    Requires finalize() so the state after the last step is known; an
    interval whose state persists through termination is marked unflipped.
    """
    if tracker.steps == 0:
        return []
    if tracker._final_topology is None:
        raise ValueError("tracker not finalized; call finalize() first")
    topo = np.stack(tracker.topology + [tracker._final_topology])  # (steps+1, d)
    flux = np.stack(tracker.flux)                                  # (steps, d)
    pressure = np.asarray(tracker.pressure)
    intervals = []
    for w in range(tracker.d):
        column = topo[:, w]
        start = 0
        for step in range(1, tracker.steps + 1):
            if column[step] != column[start]:
                intervals.append(_make_interval(w, start, step - 1, column, flux,
                                                pressure, flipped=True))
                start = step
        if start < tracker.steps:
            intervals.append(_make_interval(w, start, tracker.steps - 1, column,
                                            flux, pressure, flipped=False))
    return intervals


def _make_interval(w, start, end, column, flux, pressure, flipped):
    window = slice(start, end + 1)
    return PhaseInterval(
        weight=w,
        start=start,
        end=end,
        pruned=(column[start] == 0),
        flipped=flipped,
        mean_flux=float(flux[window, w].mean()),
        mean_pressure=float(pressure[window].mean()),
    )


@dataclass
class RegrowthCheck:
    """Outcome of checking every flip-terminated interval against pressure."""

    regrown_intervals: int = 0
    pruned_endings: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_regrowth_inequality(tracker: FluxTracker) -> RegrowthCheck:
    """Check the flip conditions over the whole log.

    A pruned interval that ends in regrowth must have mean flux strictly
    above mean pressure; an active interval that ends in pruning must have
    mean tendency strictly below it. Only meaningful for runs whose
    presence parameters were trained by plain constant-rate SGD.
    """
    check = RegrowthCheck()
    for interval in extract_intervals(tracker):
        if not interval.flipped:
            continue
        if interval.pruned:
            check.regrown_intervals += 1
            if not interval.mean_flux > interval.mean_pressure:
                check.violations.append(interval)
        else:
            check.pruned_endings += 1
            if not interval.mean_flux < interval.mean_pressure:
                check.violations.append(interval)
    return check


# -- loss-difference oracles ---------------------------------------------------


@dataclass
class FluxOracleResult:
    """Flux estimates vs true loss differences for pruned weights.

    Arrays are indexed [weight, scale]: entry (i, j) restores pruned
    weight i at scales[j] times its stored magnitude.
    """

    layer: np.ndarray
    index: np.ndarray
    scales: tuple
    flux_estimate: np.ndarray
    loss_difference: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return self.loss_difference - self.flux_estimate


def flux_loss_difference(net: MaskedNet, x, y,
                         scales=(1.0, 0.5, 0.25, 0.125)) -> FluxOracleResult:
    """Compare each pruned weight's flux against the true loss change.

    For pruned weight i restored at lambda * omega_i, the first-order
    estimate of L(0) - L(lambda * omega_i) is lambda * A_i * omega_i, with
    A_i read from a backward pass at the pruned state. The truth comes
    from re-evaluating the loss with that one entry overridden.
    """
    grads = net.backward(x, y)
    base_loss = net.loss(x, y)
    thetas = net.thetas()
    biases = [layer.bias for layer in net.layers]

    rows_layer, rows_index = [], []
    flux_rows, diff_rows = [], []
    for li, layer in enumerate(net.layers):
        pruned = np.argwhere(layer.t <= 0)
        descent = layer.descent
        for idx in pruned:
            idx = tuple(idx)
            omega = layer.omega[idx]
            a_val = descent[idx]
            flux_row, diff_row = [], []
            for lam in scales:
                saved = thetas[li][idx]
                thetas[li][idx] = lam * omega
                restored_loss = masked_forward_loss(thetas, biases, x, y)
                thetas[li][idx] = saved
                flux_row.append(lam * a_val * omega)
                diff_row.append(base_loss - restored_loss)
            rows_layer.append(li)
            rows_index.append(np.ravel_multi_index(idx, layer.omega.shape))
            flux_rows.append(flux_row)
            diff_rows.append(diff_row)
    assert abs(grads.loss - base_loss) < 1e-12  # same forward, two paths
    return FluxOracleResult(
        layer=np.asarray(rows_layer, dtype=np.int64),
        index=np.asarray(rows_index, dtype=np.int64),
        scales=tuple(scales),
        flux_estimate=np.asarray(flux_rows, dtype=np.float64),
        loss_difference=np.asarray(diff_rows, dtype=np.float64),
    )


def residual_scaling_slope(result: FluxOracleResult,
                           dead_tolerance: float = 1e-12) -> float:
    """Log-log slope of the mean absolute residual against the scale factor.

    Weights whose full-scale residual is below dead_tolerance contribute
    nothing (typically weights feeding dead units) and are excluded. A
    slope near 2 confirms the estimate misses only curvature terms.
    """
    residual = np.abs(result.residual)
    if residual.size == 0:
        raise ValueError("no pruned weights to aggregate")
    alive = residual[:, 0] > dead_tolerance
    if not alive.any():
        raise ValueError("every pruned weight is insensitive at full scale")
    mean_residual = residual[alive].mean(axis=0)
    log_scale = np.log(np.asarray(result.scales))
    log_res = np.log(mean_residual)
    slope = np.polyfit(log_scale, log_res, 1)[0]
    return float(slope)


def loss_increase_when_removed(net: MaskedNet, x, y):
    """True loss change from zeroing each active weight, one at a time.

    Returns (layer, index, delta) arrays where delta = L(theta_i = 0) - L.
    The brute-force counterpart of any saliency score.
    """
    base_loss = net.loss(x, y)
    thetas = net.thetas()
    biases = [layer.bias for layer in net.layers]
    rows_layer, rows_index, deltas = [], [], []
    for li, layer in enumerate(net.layers):
        for idx in np.argwhere(layer.t > 0):
            idx = tuple(idx)
            saved = thetas[li][idx]
            thetas[li][idx] = 0.0
            removed_loss = masked_forward_loss(thetas, biases, x, y)
            thetas[li][idx] = saved
            rows_layer.append(li)
            rows_index.append(np.ravel_multi_index(idx, layer.omega.shape))
            deltas.append(removed_loss - base_loss)
    return (
        np.asarray(rows_layer, dtype=np.int64),
        np.asarray(rows_index, dtype=np.int64),
        np.asarray(deltas, dtype=np.float64),
    )
