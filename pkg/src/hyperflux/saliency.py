"""Saliency baselines: score active weights, prune the weakest, retrain.

Both scores come from the classic prune-retrain protocol: magnitude is
|omega_i|, the first-order score is |omega_i * dL/domega_i| with the
gradient averaged over a reference batch. Pruning here is permanent (the
presence parameters never train during these runs), which is what makes
the resulting threshold/density points comparable to a pressure sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .network import MaskedNet
from .training import EpochRecord, TrainConfig, Trainer, converged

METHODS = ("hyperflux", "magnitude", "taylor")

PRUNED_T = -1.0


class SaliencyError(Exception):
    pass


@dataclass
class WeightScores:
    """Scores for the currently active weights, aligned entry by entry."""

    layer: np.ndarray   # layer index per scored weight
    index: np.ndarray   # flat index within that layer's weight matrix
    score: np.ndarray

    def __post_init__(self):
        if not (len(self.layer) == len(self.index) == len(self.score)):
            raise SaliencyError("score columns must align")
        if len(self.score) and self.score.min() < 0:
            raise SaliencyError("saliency scores cannot be negative")

    def __len__(self) -> int:
        return len(self.score)


def _active_refs(net: MaskedNet):
    layers, indices = [], []
    for li, layer in enumerate(net.layers):
        flat = (layer.t > 0).reshape(-1)
        idx = np.flatnonzero(flat)
        layers.append(np.full(idx.size, li, dtype=np.int64))
        indices.append(idx)
    return np.concatenate(layers), np.concatenate(indices)


def magnitude_saliency(net: MaskedNet) -> WeightScores:
    """|omega| of every active weight; pruned weights are not scored."""
    layer, index = _active_refs(net)
    scores = np.empty(layer.size, dtype=np.float64)
    for li, l in enumerate(net.layers):
        sel = layer == li
        scores[sel] = np.abs(l.omega.reshape(-1)[index[sel]])
    return WeightScores(layer=layer, index=index, score=scores)


def taylor_saliency(net: MaskedNet, x, y) -> WeightScores:
    """|omega * dL/domega| over a reference batch, active weights only.

    The gradient of a pruned weight is identically zero through the mask,
    so its score would be meaningless; such weights are excluded before
    scoring rather than scored as zero.
    """
    grads = net.backward(x, y)
    layer, index = _active_refs(net)
    scores = np.empty(layer.size, dtype=np.float64)
    for li, l in enumerate(net.layers):
        sel = layer == li
        product = l.omega.reshape(-1) * grads.omega[li].reshape(-1)
        scores[sel] = np.abs(product[index[sel]])
    return WeightScores(layer=layer, index=index, score=scores)


def imp_step(net: MaskedNet, fraction: float,
             saliency_fn: Callable[[MaskedNet], WeightScores]):
    """Prune the lowest-scoring ceil(fraction * active) weights in place.

    Ties break deterministically by (layer, flat index). Returns the
    number pruned and the threshold: the highest score among the pruned,
    so every surviving weight scores at or above it.
    """
    if not 0.0 < fraction <= 1.0:
        raise SaliencyError(f"prune fraction {fraction} outside (0, 1]")
    scores = saliency_fn(net)
    n_active = len(scores)
    if n_active == 0:
        raise SaliencyError("no active weights left to prune")
    k = math.ceil(fraction * n_active)
    order = np.lexsort((scores.index, scores.layer, scores.score))
    chosen = order[:k]
    for li, flat in zip(scores.layer[chosen], scores.index[chosen]):
        net.layers[li].t.reshape(-1)[flat] = PRUNED_T
    threshold = float(scores.score[chosen].max())
    return k, threshold


@dataclass
class PruneStepRecord:
    step: int
    threshold: float
    density: float
    accuracy: float
    epochs_done: int     # cumulative retraining epochs when measured


def run_pruning_sweep(net: MaskedNet, data, config: TrainConfig,
                      method: str = "magnitude", fraction: float = 0.1,
                      retrain_epochs: int = 10, steps: int = 40) -> list:
    """Iterative prune-retrain sweep producing one record per prune step.

    Retraining touches omega and bias only, at a constant learning rate
    and zero pressure; the mask set by each prune step is permanent. The
    first-order method re-scores on the full training split before every
    step, so scores track the retrained weights.
    """
    if method not in ("magnitude", "taylor"):
        raise SaliencyError(f"unknown saliency method {method!r}")
    cfg = replace(config, eta_w_schedule="constant", pressure_mode="constant",
                  gamma_constant=0.0, eta_t=0.0)
    trainer = Trainer(net, data, cfg)
    if method == "magnitude":
        saliency_fn = magnitude_saliency
    else:
        def saliency_fn(current):
            return taylor_saliency(current, data.train_x, data.train_y)

    records = []
    epochs_done = 0
    for step in range(1, steps + 1):
        try:
            _, threshold = imp_step(net, fraction, saliency_fn)
        except SaliencyError:
            break  # nothing left to prune
        trainer.retrain(retrain_epochs)
        epochs_done += retrain_epochs
        records.append(PruneStepRecord(
            step=step,
            threshold=threshold,
            density=net.density(),
            accuracy=net.accuracy(data.val_x, data.val_y),
            epochs_done=epochs_done,
        ))
    return records


# -- series assembly -----------------------------------------------------------


@dataclass(frozen=True)
class SeriesPoint:
    threshold: float
    density: float
    accuracy: float
    epoch: int


@dataclass
class SaliencySeries:
    """One sweep's (threshold, density, accuracy, epoch) points.

    Densities must strictly decrease along the series; thresholds must be
    non-negative. Callers drop and flag points that would break this
    before constructing the series.
    """

    method: str
    points: tuple

    def __post_init__(self):
        if self.method not in METHODS:
            raise SaliencyError(f"unknown series method {self.method!r}")
        self.points = tuple(self.points)
        for p in self.points:
            if p.threshold < 0:
                raise SaliencyError("thresholds cannot be negative")
        densities = [p.density for p in self.points]
        for a, b in zip(densities, densities[1:]):
            if b >= a:
                raise SaliencyError(
                    f"densities must strictly decrease (saw {a} then {b})")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DroppedPoint:
    reason: str
    threshold: float
    density: float


def hyperflux_series(runs: Sequence, flags: list | None = None) -> SaliencySeries:
    """Assemble a series from constant-pressure runs.

    ``runs`` holds (gamma, records) pairs. A run that has not converged
    (density still moving over its trailing window) is dropped and
    flagged, as is any point whose density fails to strictly decrease
    with gamma. The pressure itself is the threshold coordinate: at
    convergence it is the boundary flux that separates kept from pruned.
    """
    flags = flags if flags is not None else []
    candidates = []
    for gamma, records in sorted(runs, key=lambda pair: pair[0]):
        if not records:
            flags.append(DroppedPoint("empty run", gamma, float("nan")))
            continue
        last = records[-1]
        if not converged(records):
            flags.append(DroppedPoint("not converged", gamma, last.density))
            continue
        candidates.append(SeriesPoint(
            threshold=float(gamma),
            density=last.density,
            accuracy=last.val_acc,
            epoch=last.epoch,
        ))
    kept = []
    for point in candidates:
        if kept and point.density >= kept[-1].density:
            flags.append(DroppedPoint("density not decreasing",
                                      point.threshold, point.density))
            continue
        kept.append(point)
    return SaliencySeries(method="hyperflux", points=tuple(kept))


def pruning_series(records: Sequence[PruneStepRecord], method: str,
                   flags: list | None = None) -> SaliencySeries:
    """Assemble a series from prune-retrain records (density already monotone)."""
    flags = flags if flags is not None else []
    kept = []
    for r in records:
        point = SeriesPoint(threshold=r.threshold, density=r.density,
                            accuracy=r.accuracy, epoch=r.epochs_done)
        if kept and point.density >= kept[-1].density:
            flags.append(DroppedPoint("density not decreasing",
                                      point.threshold, point.density))
            continue
        kept.append(point)
    return SaliencySeries(method=method, points=tuple(kept))


def sweep_to_series(source, method: str, flags: list | None = None) -> SaliencySeries:
    """Dispatch on method: pressure sweeps take (gamma, records) pairs,
    prune-retrain sweeps take their step records."""
    if method == "hyperflux":
        return hyperflux_series(source, flags)
    if method in ("magnitude", "taylor"):
        return pruning_series(source, method, flags)
    raise SaliencyError(f"unknown series method {method!r}")


SERIES_CSV_COLUMNS = ("method", "threshold", "density", "accuracy", "epoch")


def write_series_csv(path, series: SaliencySeries) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SERIES_CSV_COLUMNS)
        for p in series.points:
            writer.writerow((series.method, repr(p.threshold), repr(p.density),
                             repr(p.accuracy), p.epoch))


def read_series_csv(path) -> SaliencySeries:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SaliencyError(f"{path} holds no series points")
    methods = {row["method"] for row in rows}
    if len(methods) != 1:
        raise SaliencyError(f"{path} mixes methods: {sorted(methods)}")
    points = tuple(SeriesPoint(
        threshold=float(row["threshold"]),
        density=float(row["density"]),
        accuracy=float(row["accuracy"]),
        epoch=int(row["epoch"]),
    ) for row in rows)
    return SaliencySeries(method=methods.pop(), points=points)
