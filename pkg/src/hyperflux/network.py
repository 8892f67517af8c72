"""Masked feed-forward network: every weight carries a presence parameter.

A weight omega_i participates in the forward pass only while its presence
parameter t_i is positive; the effective weight is theta_i = omega_i when
t_i > 0 and exactly 0 otherwise. Gradients flow to omega through the mask
and to t through a straight-through estimator, which makes the presence
parameters trainable even though the step function has zero derivative
almost everywhere.

Sign conventions used throughout: descent A_i = -dL/dtheta_i, and the
presence gradient G_i = -dL/dt_i = A_i * omega_i (with the default
straight-through factor of 1). G_i of a pruned weight is its flux; G_i of
an active weight is its magnitude tendency.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    ShapeError,
    Tape,
    Tensor,
    _softmax_ce_forward,
    _validate_labels,
    add_bias,
    matmul,
    relu,
    softmax_cross_entropy,
)

FLUX = "flux"
TENDENCY = "tendency"

T_INIT_LOW = 0.2
T_INIT_HIGH = 0.5

CHECKPOINT_VERSION = 1


def heaviside(t):
    """Unit step with H(0) = 0: a weight sitting exactly on the boundary is off."""
    arr = np.asarray(t)
    if not np.all(np.isfinite(arr)):
        raise ValueError("presence values must be finite")
    out = (arr > 0).astype(np.uint8)
    if out.ndim == 0:
        return int(out)
    return out


def effective_weights(omega, t):
    """theta = omega masked by the sign of t, with pruned entries exactly 0.0."""
    omega = np.asarray(omega, dtype=np.float64)
    t = np.asarray(t)
    if omega.shape != t.shape:
        raise ShapeError(f"omega {omega.shape} and t {t.shape} must match")
    return np.where(t > 0, omega, 0.0)


def ste_factor(t, kind: str = "one"):
    """Straight-through factor applied to the presence gradient.

    "one" is the identity pass-through and is the default everywhere; the
    sigmoid- and tanh-derived variants are kept selectable for comparison.
    """
    if kind == "one":
        return 1.0
    t = np.asarray(t, dtype=np.float64)
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-t))
        return s * (1.0 - s)
    if kind == "tanh":
        return 1.0 - np.tanh(t) ** 2
    raise ValueError(f"unknown straight-through kind: {kind!r}")


def flux_gradient(descent, omega, ste=1.0):
    """G = A * omega * STE, the negative loss gradient on a presence parameter."""
    return np.multiply(descent, omega) * ste


def classify_gradient(g, t) -> str:
    """Tag a presence gradient: flux while pruned (t <= 0), tendency while active.

    The tag is for logging and analysis only; it never changes the value.
    """
    return FLUX if t <= 0 else TENDENCY


def flux_mask(t) -> np.ndarray:
    """Boolean array marking entries whose presence gradient counts as flux."""
    return np.asarray(t) <= 0


def density(t) -> float:
    """Fraction of presence parameters currently positive."""
    arrays = _as_array_list(t)
    total = sum(a.size for a in arrays)
    if total == 0:
        raise ValueError("density of an empty parameter set is undefined")
    active = sum(int((a > 0).sum()) for a in arrays)
    return active / total


def aggregated_flux(values) -> float:
    """Mean presence gradient over a family of weights (e.g. one pruned layer)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("aggregated flux over an empty family is undefined")
    return float(arr.mean())


def _as_array_list(t) -> list:
    if isinstance(t, np.ndarray):
        return [t]
    return [np.asarray(a) for a in t]


class FlipLog:
    """Counts topology transitions: per-step totals and per-weight counters."""

    def __init__(self, shapes: Sequence[tuple]):
        self.per_weight = [np.zeros(s, dtype=np.int64) for s in shapes]
        self.steps: list[tuple[int, int]] = []  # (regrown, pruned) per step

    def record(self, before, after) -> None:
        before = _as_array_list(before)
        after = _as_array_list(after)
        regrown = 0
        pruned = 0
        for i, (b, a) in enumerate(zip(before, after)):
            b = np.asarray(b, dtype=bool)
            a = np.asarray(a, dtype=bool)
            regrown += int((~b & a).sum())
            pruned += int((b & ~a).sum())
            self.per_weight[i] += (b != a)
        self.steps.append((regrown, pruned))

    def step_flips(self, k: int) -> int:
        regrown, pruned = self.steps[k]
        return regrown + pruned

    @property
    def total_flips(self) -> int:
        return sum(r + p for r, p in self.steps)

    @property
    def per_weight_total(self) -> int:
        return int(sum(c.sum() for c in self.per_weight))


def record_flips(topology_before, topology_after, log: FlipLog) -> FlipLog:
    log.record(topology_before, topology_after)
    return log


class MaskedLayer:
    """One affine layer: weights, presence parameters, and an unmasked bias."""

    def __init__(self, omega: np.ndarray, t: np.ndarray, bias: np.ndarray):
        self.omega = np.asarray(omega, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.omega.ndim != 2 or self.omega.shape != self.t.shape:
            raise ShapeError(
                f"omega {self.omega.shape} and t {self.t.shape} must be equal matrices"
            )
        if self.bias.shape != (self.omega.shape[1],):
            raise ShapeError(
                f"bias {self.bias.shape} does not fit fan-out {self.omega.shape[1]}"
            )
        # -dL/dtheta from the most recent backward pass, None before any.
        self.descent: np.ndarray | None = None

    @property
    def fan_in(self) -> int:
        return self.omega.shape[0]

    @property
    def fan_out(self) -> int:
        return self.omega.shape[1]

    def theta(self) -> np.ndarray:
        return effective_weights(self.omega, self.t)

    def topology(self) -> np.ndarray:
        return (self.t > 0).astype(np.uint8)


@dataclass
class Gradients:
    """Raw gradients of the task loss for one batch (no pressure term)."""

    loss: float
    omega: list
    bias: list
    presence: list  # dL/dt via the straight-through estimator


class MaskedNet:
    """ReLU MLP whose weights are individually gated by presence parameters.

    Biases are always active: they carry no presence parameter, receive no
    pressure, and do not count toward density.
    """

    def __init__(self, layers: Sequence[MaskedLayer], ste: str = "one"):
        layers = list(layers)
        if not layers:
            raise ShapeError("a masked net needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i - 1].fan_out != layers[i].fan_in:
                raise ShapeError(
                    f"layer {i}: fan-in {layers[i].fan_in} does not match "
                    f"layer {i - 1} fan-out {layers[i - 1].fan_out}"
                )
        ste_factor(0.0, ste)  # validate the kind early
        self.layers = layers
        self.ste = ste

    @classmethod
    def initialize(
        cls,
        sizes: Sequence[int],
        seed: int = 0,
        ste: str = "one",
        t_low: float = T_INIT_LOW,
        t_high: float = T_INIT_HIGH,
    ) -> "MaskedNet":
        """He-style weight init; presence parameters uniform in [t_low, t_high].

        The presence range starts strictly positive so a fresh net is dense.
        """
        if len(sizes) < 2:
            raise ShapeError("need at least input and output sizes")
        rng = np.random.default_rng((seed, 0))
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            omega = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            t = rng.uniform(t_low, t_high, size=(fan_in, fan_out))
            bias = np.zeros(fan_out)
            layers.append(MaskedLayer(omega, t, bias))
        return cls(layers, ste=ste)

    @property
    def d(self) -> int:
        """Total number of maskable weights."""
        return sum(l.omega.size for l in self.layers)

    @property
    def sizes(self) -> tuple:
        return (self.layers[0].fan_in, *(l.fan_out for l in self.layers))

    def topology(self) -> list:
        return [l.topology() for l in self.layers]

    def thetas(self) -> list:
        return [l.theta() for l in self.layers]

    def presence(self) -> list:
        return [l.t for l in self.layers]

    def density(self) -> float:
        return density([l.t for l in self.layers])

    def active_counts(self) -> tuple:
        return tuple(int((l.t > 0).sum()) for l in self.layers)

    def layer_shapes(self) -> list:
        """(fan_in, fan_out, active_count) per layer, for the FLOP accounting."""
        return [(l.fan_in, l.fan_out, int((l.t > 0).sum())) for l in self.layers]

    def clone(self) -> "MaskedNet":
        layers = [
            MaskedLayer(l.omega.copy(), l.t.copy(), l.bias.copy()) for l in self.layers
        ]
        return MaskedNet(layers, ste=self.ste)

    # -- forward / backward ------------------------------------------------

    def _logits(self, x: np.ndarray, thetas: Sequence[np.ndarray]) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.layers[0].fan_in:
            raise ShapeError(
                f"input batch {h.shape} does not fit fan-in {self.layers[0].fan_in}"
            )
        last = len(self.layers) - 1
        for i, (layer, theta) in enumerate(zip(self.layers, thetas)):
            h = h @ theta + layer.bias
            if i != last:
                h = np.maximum(h, 0.0)
        return h

    def logits(self, x) -> np.ndarray:
        return self._logits(x, self.thetas())

    def loss(self, x, y) -> float:
        """Task loss without recording a tape; matches the taped value bit for bit."""
        logits = self.logits(x)
        labels = _validate_labels(logits.shape, y)
        value, _ = _softmax_ce_forward(logits, labels)
        return float(value)

    def forward_eval(self, x, y):
        """Taped forward pass through the effective weights.

        Returns (loss tensor, tape, theta leaves); the leaves collect
        dL/dtheta when the tape is walked backward.
        """
        tape = Tape()
        h = Tensor(np.asarray(x, dtype=np.float64))
        if h.values.ndim != 2 or h.shape[1] != self.layers[0].fan_in:
            raise ShapeError(
                f"input batch {h.shape} does not fit fan-in {self.layers[0].fan_in}"
            )
        leaves = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            theta = Tensor(layer.theta())
            leaves.append(theta)
            bias = Tensor(layer.bias)
            leaves.append(bias)
            h = add_bias(tape, matmul(tape, h, theta), bias)
            if i != last:
                h = relu(tape, h)
        loss = softmax_cross_entropy(tape, h, y)
        return loss, tape, leaves

    def backward(self, x, y) -> Gradients:
        """One taped forward/backward pass; caches descent per layer.

        The returned presence gradient is dL/dt = (dL/dtheta) * omega * STE;
        the pressure term is the trainer's to add.
        """
        loss, tape, leaves = self.forward_eval(x, y)
        tape.backward(loss)
        omega_grads, bias_grads, presence_grads = [], [], []
        for layer, theta_leaf, bias_leaf in zip(
            self.layers, leaves[::2], leaves[1::2]
        ):
            theta_grad = theta_leaf.grad
            layer.descent = -theta_grad
            mask = layer.t > 0
            omega_grads.append(theta_grad * mask)
            bias_grads.append(bias_leaf.grad.copy())
            presence_grads.append(
                theta_grad * layer.omega * ste_factor(layer.t, self.ste)
            )
        return Gradients(
            loss=loss.item(),
            omega=omega_grads,
            bias=bias_grads,
            presence=presence_grads,
        )

    def flux_gradients(self) -> list:
        """G per layer from the cached descent: G = A * omega * STE."""
        out = []
        for layer in self.layers:
            if layer.descent is None:
                raise ValueError("no backward pass has run yet")
            out.append(
                flux_gradient(layer.descent, layer.omega, ste_factor(layer.t, self.ste))
            )
        return out

    def predict(self, x) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def accuracy(self, x, y) -> float:
        y = np.asarray(y)
        if y.size == 0:
            raise ValueError("accuracy of an empty batch is undefined")
        return float((self.predict(x) == y).mean())

    # -- finite-difference protocol -----------------------------------------

    def parameters(self):
        """Differentiable parameters only: omega and bias, not t."""
        pairs = []
        for i, layer in enumerate(self.layers):
            pairs.append((f"omega{i}", layer.omega))
            pairs.append((f"bias{i}", layer.bias))
        return pairs

    def gradients(self, x, y) -> dict:
        grads = self.backward(x, y)
        out = {}
        for i in range(len(self.layers)):
            out[f"omega{i}"] = grads.omega[i]
            out[f"bias{i}"] = grads.bias[i]
        return out


def masked_forward_loss(thetas, biases, x, y, hidden_relu: bool = True) -> float:
    """Pure-numpy loss of an MLP given explicit effective weights.

    Used by the loss-difference oracles, which need to evaluate the loss
    with a single theta entry overridden without touching a net.
    """
    h = np.asarray(x, dtype=np.float64)
    last = len(thetas) - 1
    for i, (theta, bias) in enumerate(zip(thetas, biases)):
        h = h @ theta + bias
        if hidden_relu and i != last:
            h = np.maximum(h, 0.0)
    labels = _validate_labels(h.shape, y)
    value, _ = _softmax_ce_forward(h, labels)
    return float(value)


# -- checkpointing -----------------------------------------------------------


def save_checkpoint(path, net: MaskedNet, extra: dict | None = None) -> None:
    """Write net parameters (and optional extra arrays/JSON) to an .npz file.

    Round-trips bit-exactly: arrays are stored as float64 without any
    transformation.
    """
    payload = {
        "format_version": np.int64(CHECKPOINT_VERSION),
        "sizes": np.asarray(net.sizes, dtype=np.int64),
        "ste": np.str_(net.ste),
        "n_layers": np.int64(len(net.layers)),
    }
    for i, layer in enumerate(net.layers):
        payload[f"layer{i}_omega"] = layer.omega
        payload[f"layer{i}_t"] = layer.t
        payload[f"layer{i}_bias"] = layer.bias
    if extra:
        for key, value in extra.items():
            if isinstance(value, str):
                payload[f"extra_json_{key}"] = np.str_(value)
            else:
                payload[f"extra_{key}"] = np.asarray(value)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


class CheckpointError(Exception):
    pass


def load_checkpoint(path):
    """Read a checkpoint; returns (net, extra dict)."""
    try:
        with np.load(path, allow_pickle=False) as data:
            contents = {k: data[k] for k in data.files}
    except (OSError, ValueError, io.UnsupportedOperation) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "format_version" not in contents:
        raise CheckpointError(f"{path} is not a recognized checkpoint")
    version = int(contents["format_version"])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format {version} not supported (expected {CHECKPOINT_VERSION})"
        )
    n_layers = int(contents["n_layers"])
    layers = []
    for i in range(n_layers):
        layers.append(
            MaskedLayer(
                contents[f"layer{i}_omega"],
                contents[f"layer{i}_t"],
                contents[f"layer{i}_bias"],
            )
        )
    net = MaskedNet(layers, ste=str(contents["ste"]))
    extra = {}
    for key, value in contents.items():
        if key.startswith("extra_json_"):
            extra[key[len("extra_json_"):]] = str(value)
        elif key.startswith("extra_"):
            extra[key[len("extra_"):]] = value
    return net, extra


def checkpoint_config(extra: dict) -> dict:
    """Decode the JSON config blob a trainer stores inside a checkpoint."""
    if "config" not in extra:
        raise CheckpointError("checkpoint carries no trainer config")
    return json.loads(extra["config"])
