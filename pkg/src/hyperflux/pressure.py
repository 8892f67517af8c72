"""Pressure: a constant per-element pull on every presence parameter.

The pressure loss is (gamma / d) * sum(t), so its gradient on each t_i is
exactly gamma / d regardless of the weight's state. gamma itself comes
from a momentum-style scheduler: a base value that a per-epoch decision
pushes up or down, with an inertia term that grows while the decision
keeps pointing the same way and resets the moment it flips.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class PressureState:
    """Scheduler state. step is the base increment u; exponent maps base to gamma.

    At most one of the two inertia terms is nonzero at any time; each
    consecutive same-direction decision adds step/4 to the active one.
    The base may go negative (stored as-is, so recovery takes as many
    raise decisions as the dips took), but gamma clamps at zero.
    """

    base: float = 0.0
    inertia_up: float = 0.0
    inertia_down: float = 0.0
    step: float = 0.1
    exponent: float = 1.5
    gamma: float = 0.0

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("scheduler step must be positive")
        if self.exponent <= 0:
            raise ValueError("scheduler exponent must be positive")
        if self.inertia_up < 0 or self.inertia_down < 0:
            raise ValueError("inertia terms cannot be negative")
        if self.inertia_up and self.inertia_down:
            raise ValueError("only one inertia direction may be active")


def sched_step(state: PressureState, raise_pressure: bool) -> PressureState:
    """One scheduler transition. Pure: returns a new state."""
    if raise_pressure:
        base = state.base + state.step + state.inertia_up
        inertia_up = state.inertia_up + state.step / 4.0
        inertia_down = 0.0
    else:
        base = state.base - state.step - state.inertia_down
        inertia_down = state.inertia_down + state.step / 4.0
        inertia_up = 0.0
    gamma = max(base, 0.0) ** state.exponent
    return replace(
        state,
        base=base,
        inertia_up=inertia_up,
        inertia_down=inertia_down,
        gamma=gamma,
    )


def pressure_loss(t, gamma: float, d: int) -> float:
    """(gamma / d) * sum of all presence parameters."""
    if gamma < 0:
        raise ValueError("gamma cannot be negative")
    arrays = [np.asarray(a) for a in (t if not isinstance(t, np.ndarray) else [t])]
    count = sum(a.size for a in arrays)
    if d <= 0 or count != d:
        raise ValueError(f"d={d} does not match {count} presence parameters")
    total = sum(float(a.sum()) for a in arrays)
    return gamma * total / d


def pressure_gradient(gamma: float, d: int) -> float:
    """The same constant gamma / d for every element, active or pruned."""
    if gamma < 0:
        raise ValueError("gamma cannot be negative")
    if d <= 0:
        raise ValueError("d must be positive")
    return gamma / d


@dataclass(frozen=True)
class SparsityCurve:
    """Target density curve f(e) = 100 * prod(decay[:e]), in percent.

    decay holds one factor per pruning epoch, each in (0, 1], so the
    curve starts at 100 and never increases.
    """

    decay: tuple

    def __post_init__(self):
        object.__setattr__(self, "decay", tuple(float(d) for d in self.decay))
        for d in self.decay:
            if not 0.0 < d <= 1.0:
                raise ValueError(f"decay factor {d} outside (0, 1]")

    @property
    def horizon(self) -> int:
        return len(self.decay)

    @classmethod
    def geometric(cls, target_pct: float, epochs: int) -> "SparsityCurve":
        """Constant per-epoch factor reaching target_pct after the last epoch."""
        if not 0.0 < target_pct <= 100.0:
            raise ValueError("target percentage must be in (0, 100]")
        if epochs <= 0:
            raise ValueError("need at least one epoch")
        ratio = (target_pct / 100.0) ** (1.0 / epochs)
        return cls((ratio,) * epochs)


def curve_eval(curve: SparsityCurve, e: int) -> float:
    """f(e) as a running product; f(0) is exactly 100."""
    if e < 0 or e > curve.horizon:
        raise ValueError(f"epoch {e} outside curve horizon {curve.horizon}")
    f = 100.0
    for d in curve.decay[:e]:
        f *= d
    return f


def policy_trajectory(density_pct: float, e: int, curve: SparsityCurve,
                      invert: bool = False) -> bool:
    """Raise pressure while measured density sits above the target curve.

    Ties relax: a density exactly on the curve returns False either way.
    ``invert`` flips the comparison for experiments that chase the curve
    from below.
    """
    if not 0.0 <= density_pct <= 100.0:
        raise ValueError(f"density {density_pct} outside [0, 100]")
    target = curve_eval(curve, e)
    if invert:
        return density_pct < target
    return density_pct > target


def policy_upper_boundary(history: Sequence[float], e: int, pruning_epochs: int,
                          target_density: float) -> bool:
    """Raise pressure when density is falling slower than the pace that would
    just reach the target by the end of the pruning stage.

    The required pace is the geometric ratio (target / current)^(1/remaining).
    history holds the density after each completed epoch, current last; all
    densities and the target share one unit (percent or fraction).
    """
    if not history:
        raise ValueError("empty density history")
    if target_density <= 0:
        raise ValueError("target density must be positive")
    remaining = pruning_epochs - e
    if remaining <= 0:
        raise ValueError("no pruning epochs remain to schedule against")
    current = float(history[-1])
    if current <= target_density:
        return False
    if len(history) < 2:
        return True  # no pace measurable yet; push
    previous = float(history[-2])
    if previous <= 0:
        raise ValueError("density history must stay positive")
    required = (target_density / current) ** (1.0 / remaining)
    observed = current / previous
    return observed > required
