"""Exact FLOP accounting for dense-vs-pruned feed-forward inference.

A dense affine layer costs 2 * fan_in * fan_out (one multiply and one
add per weight); a pruned layer pays only for its active weights. The
training estimate charges three sparse passes (forward, weight gradient,
input gradient) plus one dense pass for the presence-parameter side,
against four dense-equivalent passes for the baseline. All counts are
exact integers and the ratios exact fractions.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence


@dataclass(frozen=True)
class FlopsReport:
    dense_flops: int
    sparse_flops: int
    train_ratio: Fraction   # sparse training cost over dense training cost
    test_ratio: Fraction    # sparse inference cost over dense inference cost

    def summary(self) -> str:
        lines = [
            f"dense inference FLOPs:  {self.dense_flops}",
            f"sparse inference FLOPs: {self.sparse_flops}",
            f"test ratio:  {self.test_ratio} ({float(self.test_ratio):.6f})",
            f"train ratio: {self.train_ratio} ({float(self.train_ratio):.6f})",
        ]
        if self.test_ratio == 1:
            lines.append("note: fully dense; the dense baseline itself is 1")
        return "\n".join(lines)


def flops_account(layer_shapes: Sequence) -> FlopsReport:
    """Account a topology given (fan_in, fan_out, active_count) per layer.

    train_ratio = sparse/dense + 1/3 exactly: the numerator 3*f_s + f_d
    over the baseline 3*f_d + f_d. A fully pruned net still pays the
    dense presence pass, so its train ratio is exactly 1/3.
    """
    if not layer_shapes:
        raise ValueError("no layers to account")
    dense = 0
    sparse = 0
    for i, (fan_in, fan_out, active) in enumerate(layer_shapes):
        if fan_in <= 0 or fan_out <= 0:
            raise ValueError(f"layer {i}: fan sizes must be positive")
        if not 0 <= active <= fan_in * fan_out:
            raise ValueError(
                f"layer {i}: active count {active} outside [0, {fan_in * fan_out}]")
        dense += 2 * fan_in * fan_out
        sparse += 2 * active
    train_ratio = Fraction(sparse, dense) + Fraction(1, 3)
    test_ratio = Fraction(sparse, dense)
    return FlopsReport(dense_flops=dense, sparse_flops=sparse,
                       train_ratio=train_ratio, test_ratio=test_ratio)


def flops_for_net(net) -> FlopsReport:
    """Account a masked net's current topology."""
    return flops_account(net.layer_shapes())
