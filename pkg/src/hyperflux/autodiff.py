"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation is recorded on an explicit tape (a Wengert list); the
backward pass walks the tape in exact reverse recording order and
accumulates gradients into each operand. The supported operation set is
fixed to what a small feed-forward classifier needs: matrix multiply,
bias add, elementwise multiply, ReLU, softmax cross-entropy, sum, and
scaling by a constant.

All storage is float64. Desk-scale problems are small enough that the
extra precision is free, and the finite-difference and loss-difference
oracles downstream need the headroom.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

# When enabled, tensor construction and the backward pass reject non-finite
# values instead of letting NaN propagate into a training run.
DEBUG_CHECKS = True


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(AutodiffError):
    """The tape is empty, already consumed, or seeded with a non-scalar."""


class Tensor:
    """A dense float64 array plus a gradient buffer filled by backward().

    Tensors do not own autodiff logic; operations live at module level and
    record themselves on a Tape. ``values`` may alias caller memory (no
    copy is made for float64 input), which is what lets an optimizer
    update a parameter in place between forward passes.
    """

    __slots__ = ("values", "grad")

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        if DEBUG_CHECKS and not np.all(np.isfinite(self.values)):
            raise AutodiffError("tensor constructed with non-finite values")
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.values.shape})"


class TapeOp(NamedTuple):
    inputs: tuple
    output: Tensor
    backward_rule: Callable


class Tape:
    """Ordered record of operations; replayed in reverse by backward().

    Recording order is topological by construction: an operation's output
    tensor is freshly created, so it can only feed operations recorded
    later. A tape is single-use; call reset() to record a new forward
    pass through the same function.
    """

    def __init__(self):
        self._ops: list[TapeOp] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, inputs: tuple, output: Tensor, backward_rule: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already consumed; reset() before recording")
        self._ops.append(TapeOp(inputs, output, backward_rule))

    def backward(self, seed: Tensor | None = None) -> None:
        """Accumulate gradients of a scalar output into every operand.

        ``seed`` defaults to the output of the last recorded operation and
        must hold a single element. Gradient buffers of all tensors the
        tape touches are (re)initialized to zero first, so stale values
        from earlier passes cannot leak in.
        """
        if not self._ops:
            raise TapeError("backward called before any forward operation")
        if self._consumed:
            raise TapeError("tape already consumed; reset() and rerun forward")
        target = seed if seed is not None else self._ops[-1].output
        if target.size != 1:
            raise TapeError("backward target must be a scalar")

        touched: dict[int, Tensor] = {}
        for op in self._ops:
            for t in (*op.inputs, op.output):
                touched[id(t)] = t
        for t in touched.values():
            t.grad = np.zeros_like(t.values)
        target.grad = np.ones_like(target.values)

        for op in reversed(self._ops):
            out_grad = op.output.grad
            contributions = op.backward_rule(out_grad)
            for operand, contribution in zip(op.inputs, contributions):
                if contribution is not None:
                    operand.grad += contribution
        if DEBUG_CHECKS:
            for t in touched.values():
                if not np.all(np.isfinite(t.grad)):
                    raise AutodiffError("non-finite gradient produced in backward")
        self._consumed = True

    def reset(self) -> None:
        self._ops.clear()
        self._consumed = False


def backward(tape: Tape, seed: Tensor | None = None) -> None:
    tape.backward(seed)


def matmul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    out = Tensor(a.values @ b.values)

    def rule(g):
        return g @ b.values.T, a.values.T @ g

    tape.record((a, b), out, rule)
    return out


def add_bias(tape: Tape, x: Tensor, bias: Tensor) -> Tensor:
    if x.values.ndim != 2 or bias.values.ndim != 1:
        raise ShapeError("add_bias expects a matrix and a vector")
    if x.shape[1] != bias.shape[0]:
        raise ShapeError(
            f"bias length {bias.shape[0]} does not match width {x.shape[1]}"
        )
    out = Tensor(x.values + bias.values)

    def rule(g):
        return g, g.sum(axis=0)

    tape.record((x, bias), out, rule)
    return out


def multiply(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"multiply shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.values * b.values)

    def rule(g):
        return g * b.values, g * a.values

    tape.record((a, b), out, rule)
    return out


def relu(tape: Tape, x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.values, 0.0))

    # Subgradient at 0 is taken as 0, consistent with the step convention
    # used for presence parameters.
    def rule(g):
        return (g * (x.values > 0.0),)

    tape.record((x,), out, rule)
    return out


def tensor_sum(tape: Tape, x: Tensor) -> Tensor:
    out = Tensor(x.values.sum())

    def rule(g):
        return (np.full_like(x.values, float(g)),)

    tape.record((x,), out, rule)
    return out


def scale(tape: Tape, x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(x.values * factor)

    def rule(g):
        return (g * factor,)

    tape.record((x,), out, rule)
    return out


def _softmax_ce_forward(logits: np.ndarray, labels: np.ndarray):
    """Stable softmax cross-entropy. Returns (mean loss, probabilities).

    Shared by the taped op and the pure evaluation path in the network
    module so both produce bit-identical values.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    rows = np.arange(logits.shape[0])
    per_sample = np.log(total[:, 0]) - shifted[rows, labels]
    return per_sample.mean(), probs


def _validate_labels(logits_shape, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits_shape[0]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch {logits_shape[0]}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= logits_shape[1]):
        raise ShapeError("label out of range for logit width")
    return labels


def softmax_cross_entropy(tape: Tape, logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of a logit batch against integer labels."""
    if logits.values.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError("softmax_cross_entropy expects a non-empty logit matrix")
    labels = _validate_labels(logits.shape, labels)
    value, probs = _softmax_ce_forward(logits.values, labels)
    out = Tensor(value)
    batch = logits.shape[0]
    rows = np.arange(batch)

    def rule(g):
        local = probs.copy()
        local[rows, labels] -= 1.0
        return (local * (float(g) / batch),)

    tape.record((logits,), out, rule)
    return out


class LayerStack:
    """Plain dense feed-forward classifier: ReLU hidden layers, logit output.

    Exists to exercise and verify the engine itself. A stack with zero
    layers treats its input as logits directly.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases):
            raise ShapeError("weights and biases must pair up")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} clash")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input width does not match layer {i - 1}")

    @classmethod
    def random(cls, sizes: Sequence[int], rng: np.random.Generator) -> "LayerStack":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale_w = np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, scale_w, size=(fan_in, fan_out)))
            biases.append(rng.normal(0.0, 0.1, size=fan_out))
        return cls(weights, biases)

    def forward_eval(self, x, y):
        """Build the loss graph for one batch. Returns (loss tensor, tape)."""
        tape = Tape()
        h = Tensor(x)
        if h.values.ndim != 2:
            raise ShapeError("input batch must be rank 2")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if h.shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: input width {h.shape[1]} != fan-in {w.shape[0]}"
                )
            h = add_bias(tape, matmul(tape, h, Tensor(w)), Tensor(b))
            if i != last:
                h = relu(tape, h)
        loss = softmax_cross_entropy(tape, h, y)
        return loss, tape

    def loss(self, x, y) -> float:
        loss, _ = self.forward_eval(x, y)
        return loss.item()

    def parameters(self):
        pairs = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pairs.append((f"w{i}", w))
            pairs.append((f"b{i}", b))
        return pairs

    def gradients(self, x, y) -> dict:
        tape = Tape()
        h = Tensor(x)
        leaves = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if h.shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: input width {h.shape[1]} != fan-in {w.shape[0]}"
                )
            wt, bt = Tensor(w), Tensor(b)
            leaves.append((f"w{i}", wt))
            leaves.append((f"b{i}", bt))
            h = add_bias(tape, matmul(tape, h, wt), bt)
            if i != last:
                h = relu(tape, h)
        loss = softmax_cross_entropy(tape, h, y)
        tape.backward(loss)
        return {name: leaf.grad.copy() for name, leaf in leaves}


def forward_eval(net, x, y):
    """Run a net's forward pass under the tape. Returns (loss, tape)."""
    return net.forward_eval(x, y)


def numeric_gradients(net, x, y, epsilon: float = 1e-6) -> dict:
    """Central finite differences of net.loss over every parameter entry.

    Parameters are perturbed in place and restored, so the net must expose
    mutable arrays through parameters().
    """
    grads = {}
    for name, param in net.parameters():
        out = np.zeros_like(param)
        flat = param.reshape(-1)
        flat_out = out.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + epsilon
            hi = net.loss(x, y)
            flat[j] = original - epsilon
            lo = net.loss(x, y)
            flat[j] = original
            flat_out[j] = (hi - lo) / (2.0 * epsilon)
        grads[name] = out
    return grads


def max_relative_error(analytic: dict, numeric: dict) -> float:
    """Worst relative disagreement between two gradient dictionaries."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def finite_diff_check(net, x, y, epsilon: float = 1e-6) -> float:
    """Compare analytic gradients with central differences; return worst error.

    A net with no parameters has nothing to disagree about, so the error
    is 0 by convention.
    """
    params = net.parameters()
    if not params:
        return 0.0
    analytic = net.gradients(x, y)
    numeric = numeric_gradients(net, x, y, epsilon)
    return max_relative_error(analytic, numeric)
