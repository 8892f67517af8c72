"""Training loop: a pruning stage under scheduled pressure, then stabilization.

The weights and the presence parameters train side by side from the same
backward pass, but against different objectives: omega sees only the task
loss, t sees the task loss plus pressure. Pressure updates once per epoch
through the scheduler; parameters update once per mini-batch.

During stabilization the pressure is exactly zero and the presence
learning rate decays by 0.9 before each epoch, so flux alone decides
which pruned weights return.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .diagnostics import FluxTracker
from .network import (
    FlipLog,
    MaskedNet,
    load_checkpoint,
    save_checkpoint,
)
from .pressure import (
    PressureState,
    SparsityCurve,
    curve_eval,
    policy_trajectory,
    policy_upper_boundary,
    pressure_gradient,
    pressure_loss,
    sched_step,
)

STABILIZATION_ETA_T_DECAY = 0.9

RECORD_CSV_COLUMNS = ("epoch", "density", "loss", "pressure_loss", "gamma",
                      "flips", "acc")


class TrainingError(Exception):
    pass


class NonFiniteLossError(TrainingError):
    """Loss or gradient went non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class TrainConfig:
    """Everything a run needs besides the net and the data.

    eta_w follows either a cosine arc from eta_w_start to eta_w_end over
    the whole run or stays constant at eta_w_start. eta_t is the presence
    learning rate entering Adam (or plain SGD when t_optimizer is "sgd",
    which is what makes the interval inequalities exact).
    """

    pruning_epochs: int = 60
    stabilization_epochs: int = 20
    pretrain_epochs: int = 20
    batch_size: int = 100
    seed: int = 1
    eta_w_start: float = 0.3
    eta_w_end: float = 0.003
    eta_w_schedule: str = "cosine"       # "cosine" | "constant"
    momentum: float = 0.9
    weight_decay: float = 0.0            # applied to omega only, off by default
    eta_t: float = 0.001
    t_optimizer: str = "adam"            # "adam" | "sgd"
    ste: str = "one"
    pressure_mode: str = "scheduled"     # "scheduled" | "constant"
    gamma_constant: float = 0.0
    step_u: float = 0.1
    exponent_alpha: float = 1.5
    policy: str = "trajectory"           # "trajectory" | "upper-boundary"
    target_density_pct: float = 30.0
    curve_decay: tuple | None = None     # explicit per-epoch factors; None = geometric
    invert_trajectory: bool = False
    track_flux: bool = False

    def __post_init__(self):
        if self.eta_w_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown eta_w schedule {self.eta_w_schedule!r}")
        if self.t_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown t optimizer {self.t_optimizer!r}")
        if self.policy not in ("trajectory", "upper-boundary"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.pressure_mode not in ("scheduled", "constant"):
            raise ValueError(f"unknown pressure mode {self.pressure_mode!r}")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")
        for name in ("pruning_epochs", "stabilization_epochs", "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} cannot be negative")
        if self.curve_decay is not None:
            self.curve_decay = tuple(float(v) for v in self.curve_decay)

    def curve(self) -> SparsityCurve:
        if self.curve_decay is not None:
            return SparsityCurve(self.curve_decay)
        epochs = max(self.pruning_epochs, 1)
        return SparsityCurve.geometric(self.target_density_pct, epochs)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "TrainConfig":
        raw = json.loads(blob)
        if raw.get("curve_decay") is not None:
            raw["curve_decay"] = tuple(raw["curve_decay"])
        return cls(**raw)


@dataclass
class EpochRecord:
    epoch: int
    phase: str               # "pretrain" | "pruning" | "stabilization" | "constant"
    density: float
    loss: float              # mean task loss over the epoch's batches
    pressure_loss: float     # evaluated at epoch end
    gamma: float
    flips: int
    train_acc: float
    val_acc: float
    eta_w: float
    eta_t: float
    layer_active: tuple
    min_saliency: float      # the pressure doubles as a running flux floor


def write_records_csv(path, records: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_CSV_COLUMNS)
        for r in records:
            writer.writerow(_record_row(r))


def _record_row(r: EpochRecord):
    return (r.epoch, repr(r.density), repr(r.loss), repr(r.pressure_loss),
            repr(r.gamma), r.flips, repr(r.val_acc))


def read_records_csv(path) -> list:
    """Read the seven public columns back; missing fields default to 0."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(EpochRecord(
                epoch=int(row["epoch"]),
                phase="",
                density=float(row["density"]),
                loss=float(row["loss"]),
                pressure_loss=float(row["pressure_loss"]),
                gamma=float(row["gamma"]),
                flips=int(row["flips"]),
                train_acc=0.0,
                val_acc=float(row["acc"]),
                eta_w=0.0,
                eta_t=0.0,
                layer_active=(),
                min_saliency=float(row["gamma"]),
            ))
    return rows


class SGD:
    """Plain SGD with optional momentum and decoupled-from-nothing weight decay
    (the decay term just joins the gradient, the classic formulation)."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p) for p in self.params] if momentum else None

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.buffers is not None:
                buf = self.buffers[i]
                buf *= self.momentum
                buf += g
                g = buf
            p -= self.lr * g

    def state_arrays(self) -> dict:
        if self.buffers is None:
            return {}
        return {f"buf{i}": b for i, b in enumerate(self.buffers)}

    def load_state_arrays(self, state: dict) -> None:
        if self.buffers is None:
            return
        for i in range(len(self.buffers)):
            self.buffers[i][...] = state[f"buf{i}"]


class Adam:
    """Standard Adam (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.count = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.count += 1
        b1c = 1.0 - self.beta1 ** self.count
        b2c = 1.0 - self.beta2 ** self.count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def reset_state(self) -> None:
        for m, v in zip(self.m, self.v):
            m[...] = 0.0
            v[...] = 0.0
        self.count = 0

    def state_arrays(self) -> dict:
        out = {"count": np.int64(self.count)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, state: dict) -> None:
        self.count = int(state["count"])
        for i in range(len(self.m)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]


def _cosine_lr(start: float, end: float, epoch: int, total: int) -> float:
    if total <= 1:
        return start
    frac = (epoch - 1) / (total - 1)
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * frac))


class Trainer:
    """Owns one net, one dataset, and all run state.

    Epoch numbering: pretraining epochs are counted separately; the main
    run numbers epochs 1..pruning_epochs+stabilization_epochs. A global
    pass counter seeds each epoch's shuffle, so a resumed run consumes
    the same sample order the uninterrupted run would have.
    """

    def __init__(self, net: MaskedNet, data, config: TrainConfig,
                 records_path=None):
        self.net = net
        self.data = data
        self.config = config
        self.curve = config.curve() if config.pressure_mode == "scheduled" else None
        omegas = [l.omega for l in net.layers]
        biases = [l.bias for l in net.layers]
        self.omega_opt = SGD(omegas, config.eta_w_start, config.momentum,
                             config.weight_decay)
        self.bias_opt = SGD(biases, config.eta_w_start, config.momentum, 0.0)
        ts = [l.t for l in net.layers]
        if config.t_optimizer == "adam":
            self.t_opt = Adam(ts, config.eta_t)
        else:
            self.t_opt = SGD(ts, config.eta_t)
        self.pressure_state = PressureState(step=config.step_u,
                                            exponent=config.exponent_alpha)
        self.gamma = 0.0 if config.pressure_mode == "scheduled" else config.gamma_constant
        self.eta_t = config.eta_t
        self.epoch = 0            # completed epochs of the main run
        self.pass_counter = 0     # every epoch of any phase bumps this
        self.density_history_pct: list[float] = []
        self.flip_log = FlipLog([l.omega.shape for l in net.layers])
        self.flux_tracker = FluxTracker(net.d) if config.track_flux else None
        self._stabilization_reset_done = False
        self.records: list[EpochRecord] = []
        self._records_path = records_path
        self._records_fh = None
        if records_path is not None:
            self._records_fh = open(records_path, "w", newline="")
            self._writer = csv.writer(self._records_fh)
            self._writer.writerow(RECORD_CSV_COLUMNS)
            self._records_fh.flush()

    # -- plumbing -----------------------------------------------------------

    @property
    def total_epochs(self) -> int:
        return self.config.pruning_epochs + self.config.stabilization_epochs

    def close(self) -> None:
        if self._records_fh is not None:
            self._records_fh.close()
            self._records_fh = None

    def _emit(self, record: EpochRecord) -> None:
        self.records.append(record)
        if self._records_fh is not None:
            self._writer.writerow(_record_row(record))
            self._records_fh.flush()

    def _eta_w(self, epoch: int) -> float:
        cfg = self.config
        if cfg.eta_w_schedule == "constant":
            return cfg.eta_w_start
        return _cosine_lr(cfg.eta_w_start, cfg.eta_w_end, epoch, self.total_epochs)

    def _flat_topology(self) -> np.ndarray:
        return np.concatenate([m.reshape(-1) for m in self.net.topology()])

    # -- one pass over the training split ------------------------------------

    def _epoch_pass(self, gamma: float, update_w: bool, update_t: bool,
                    eta_w: float, phase: str, epoch_label: int) -> EpochRecord:
        cfg = self.config
        net = self.net
        x, y = self.data.train_x, self.data.train_y
        n = x.shape[0]
        if n == 0:
            raise TrainingError("training split is empty")
        self.pass_counter += 1
        rng = np.random.default_rng((cfg.seed, self.pass_counter))
        order = rng.permutation(n)
        self.omega_opt.lr = eta_w
        self.bias_opt.lr = eta_w
        self.t_opt.lr = self.eta_t
        d = net.d
        g_over_d = pressure_gradient(gamma, d) if gamma > 0 else 0.0
        flips_this_epoch = 0
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            grads = net.backward(x[idx], y[idx])
            if not math.isfinite(grads.loss):
                raise NonFiniteLossError(
                    f"non-finite loss in epoch {epoch_label} ({phase}), "
                    f"batch at offset {start}",
                    diagnostic={
                        "epoch": epoch_label, "phase": phase, "batch_offset": start,
                        "loss": grads.loss, "gamma": gamma,
                        "density": net.density(),
                        "last_finite_loss": losses[-1] if losses else None,
                    },
                )
            losses.append(grads.loss)
            if update_w:
                self.omega_opt.step(grads.omega)
                self.bias_opt.step(grads.bias)
            if update_t and self.eta_t > 0:
                before = net.topology()
                if self.flux_tracker is not None:
                    flux_flat = np.concatenate(
                        [(-g).reshape(-1) for g in grads.presence])
                    self.flux_tracker.log_step(
                        flux_flat, g_over_d,
                        np.concatenate([m.reshape(-1) for m in before]))
                t_grads = [g + g_over_d for g in grads.presence]
                self.t_opt.step(t_grads)
                after = net.topology()
                self.flip_log.record(before, after)
                flips_this_epoch += self.flip_log.step_flips(-1)
        record = EpochRecord(
            epoch=epoch_label,
            phase=phase,
            density=net.density(),
            loss=float(np.mean(losses)),
            pressure_loss=pressure_loss(net.presence(), gamma, d),
            gamma=gamma,
            flips=flips_this_epoch,
            train_acc=net.accuracy(x, y),
            val_acc=net.accuracy(self.data.val_x, self.data.val_y)
            if len(self.data.val_idx) else float("nan"),
            eta_w=eta_w,
            eta_t=self.eta_t if update_t else 0.0,
            layer_active=net.active_counts(),
            min_saliency=gamma,
        )
        return record

    # -- public phases --------------------------------------------------------

    def pretrain(self, epochs: int | None = None) -> list:
        """Dense warmup: omega and bias train, presence parameters frozen."""
        epochs = self.config.pretrain_epochs if epochs is None else epochs
        return self._weights_only_phase(epochs, "pretrain")

    def retrain(self, epochs: int) -> list:
        """Weights-only epochs at constant eta_w; masks stay fixed."""
        return self._weights_only_phase(epochs, "retrain")

    def _weights_only_phase(self, epochs: int, phase: str) -> list:
        records = []
        for e in range(1, epochs + 1):
            rec = self._epoch_pass(0.0, update_w=True, update_t=False,
                                   eta_w=self.config.eta_w_start,
                                   phase=phase, epoch_label=e)
            records.append(rec)
        return records

    def train_epoch(self, gamma: float) -> EpochRecord:
        """One main-run epoch at the given pressure."""
        self.epoch += 1
        phase = "pruning" if self.epoch <= self.config.pruning_epochs else "stabilization"
        record = self._epoch_pass(
            gamma, update_w=True, update_t=True,
            eta_w=self._eta_w(self.epoch), phase=phase, epoch_label=self.epoch)
        self._emit(record)
        return record

    def _policy_decision(self, record: EpochRecord) -> bool:
        cfg = self.config
        density_pct = record.density * 100.0
        self.density_history_pct.append(density_pct)
        if cfg.policy == "trajectory":
            return policy_trajectory(density_pct, self.epoch, self.curve,
                                     invert=cfg.invert_trajectory)
        return policy_upper_boundary(self.density_history_pct, self.epoch,
                                     cfg.pruning_epochs, cfg.target_density_pct)

    def run_training(self) -> list:
        """Pruning stage then stabilization, resuming from self.epoch."""
        cfg = self.config
        while self.epoch < cfg.pruning_epochs:
            record = self.train_epoch(self.gamma)
            if cfg.pressure_mode == "scheduled":
                # The last epoch's decision would only shape an epoch that
                # never runs, so skip it and keep the policy horizon valid.
                if self.epoch < cfg.pruning_epochs:
                    decision = self._policy_decision(record)
                    self.pressure_state = sched_step(self.pressure_state, decision)
                    self.gamma = self.pressure_state.gamma
        while self.epoch < self.total_epochs:
            if not self._stabilization_reset_done:
                # Fresh curvature estimates for the zero-pressure phase.
                if isinstance(self.t_opt, Adam):
                    self.t_opt.reset_state()
                self._stabilization_reset_done = True
            self.eta_t *= STABILIZATION_ETA_T_DECAY
            self.train_epoch(0.0)
        if self.flux_tracker is not None:
            self.flux_tracker.finalize(self._flat_topology())
        return self.records

    def run_constant_pressure(self, gamma: float, epochs: int) -> list:
        """Fixed gamma, constant learning rates, no stabilization."""
        if gamma < 0:
            raise ValueError("gamma cannot be negative")
        for _ in range(epochs):
            self.epoch += 1
            record = self._epoch_pass(
                gamma, update_w=True, update_t=True,
                eta_w=self.config.eta_w_start, phase="constant",
                epoch_label=self.epoch)
            self._emit(record)
        if self.flux_tracker is not None:
            self.flux_tracker.finalize(self._flat_topology())
        return self.records

    # -- checkpointing ---------------------------------------------------------

    def save(self, path) -> None:
        state = {
            "config": self.config.to_json(),
            "trainer": json.dumps({
                "epoch": self.epoch,
                "pass_counter": self.pass_counter,
                "eta_t": self.eta_t,
                "gamma": self.gamma,
                "stab_reset_done": self._stabilization_reset_done,
                "density_history_pct": self.density_history_pct,
                "pressure": {
                    "base": self.pressure_state.base,
                    "inertia_up": self.pressure_state.inertia_up,
                    "inertia_down": self.pressure_state.inertia_down,
                    "step": self.pressure_state.step,
                    "exponent": self.pressure_state.exponent,
                    "gamma": self.pressure_state.gamma,
                },
            }),
        }
        for key, arr in self.omega_opt.state_arrays().items():
            state[f"omega_opt_{key}"] = arr
        for key, arr in self.bias_opt.state_arrays().items():
            state[f"bias_opt_{key}"] = arr
        for key, arr in self.t_opt.state_arrays().items():
            state[f"t_opt_{key}"] = arr
        for i, counts in enumerate(self.flip_log.per_weight):
            state[f"flips_layer{i}"] = counts
        save_checkpoint(path, self.net, extra=state)

    @classmethod
    def resume(cls, path, data, records_path=None) -> "Trainer":
        net, extra = load_checkpoint(path)
        config = TrainConfig.from_json(extra["config"])
        trainer = cls(net, data, config, records_path=records_path)
        meta = json.loads(extra["trainer"])
        trainer.epoch = int(meta["epoch"])
        trainer.pass_counter = int(meta["pass_counter"])
        trainer.eta_t = float(meta["eta_t"])
        trainer.gamma = float(meta["gamma"])
        trainer._stabilization_reset_done = bool(meta["stab_reset_done"])
        trainer.density_history_pct = [float(v) for v in meta["density_history_pct"]]
        p = meta["pressure"]
        trainer.pressure_state = PressureState(
            base=p["base"], inertia_up=p["inertia_up"],
            inertia_down=p["inertia_down"], step=p["step"],
            exponent=p["exponent"], gamma=p["gamma"])
        prefixes = {"omega_opt_": trainer.omega_opt,
                    "bias_opt_": trainer.bias_opt,
                    "t_opt_": trainer.t_opt}
        for prefix, opt in prefixes.items():
            collected = {k[len(prefix):]: v for k, v in extra.items()
                         if k.startswith(prefix)}
            if collected:
                opt.load_state_arrays(collected)
        for i in range(len(trainer.flip_log.per_weight)):
            key = f"flips_layer{i}"
            if key in extra:
                trainer.flip_log.per_weight[i][...] = extra[key]
        return trainer


def run_training(net: MaskedNet, data, config: TrainConfig,
                 records_path=None):
    """Convenience wrapper: pretrain if configured, run both stages."""
    trainer = Trainer(net, data, config, records_path=records_path)
    pretrain_records = trainer.pretrain() if config.pretrain_epochs else []
    records = trainer.run_training()
    trainer.close()
    return records, pretrain_records, trainer


def run_constant_pressure(net: MaskedNet, data, config: TrainConfig,
                          gamma: float, epochs: int, records_path=None,
                          pretrain: bool = False):
    """Convenience wrapper for a fixed-pressure run (learning rates constant)."""
    cfg = replace(config, eta_w_schedule="constant",
                  pressure_mode="constant", gamma_constant=gamma)
    trainer = Trainer(net, data, cfg, records_path=records_path)
    if pretrain and cfg.pretrain_epochs:
        trainer.pretrain()
    records = trainer.run_constant_pressure(gamma, epochs)
    trainer.close()
    return records, trainer


def converged(records: Sequence[EpochRecord], window_fraction: float = 0.2,
              tolerance_pct_points: float = 2.0) -> bool:
    """Density settled: its range over the trailing window is under tolerance."""
    if not records:
        return False
    window = max(1, int(math.ceil(len(records) * window_fraction)))
    tail = [r.density * 100.0 for r in records[-window:]]
    return (max(tail) - min(tail)) < tolerance_pct_points
