"""Shared fixtures: the reference desk problem and small trained nets.

The reference problem mirrors the CLI defaults: two interleaved spirals
against a 2-64-64-2 perceptron. Pretraining it is the expensive part, so
the dense net is built once per session and handed out as clones.
"""

from __future__ import annotations

import numpy as np
import pytest

from hyperflux.data import generate_dataset
from hyperflux.network import MaskedNet
from hyperflux.training import TrainConfig, Trainer

REFERENCE_DATASET = dict(kind="spirals", n=2000, classes=2, noise=0.08, seed=7,
                         val_fraction=0.2)
REFERENCE_SIZES = (2, 64, 64, 2)
REFERENCE_NET_SEED = 1

REFERENCE_TRAIN = dict(
    pruning_epochs=60,
    stabilization_epochs=20,
    pretrain_epochs=150,
    batch_size=100,
    seed=1,
    eta_w_start=0.5,
    eta_w_end=0.003,
    eta_w_schedule="cosine",
    momentum=0.9,
    eta_t=0.0005,
    t_optimizer="adam",
    target_density_pct=5.0,
)

# Constant-pressure protocol: fixed gamma, constant learning rates.
SWEEP_ETA_W = 0.1
SWEEP_EPOCHS = 300
SWEEP_GAMMAS = (0.02, 0.1, 0.5, 2.0, 8.0, 32.0)


def reference_config(**overrides) -> TrainConfig:
    merged = {**REFERENCE_TRAIN, **overrides}
    return TrainConfig(**merged)


@pytest.fixture(scope="session")
def reference_data():
    return generate_dataset(**REFERENCE_DATASET)


@pytest.fixture(scope="session")
def dense_reference(reference_data):
    """Pretrained dense reference net plus its validation accuracy."""
    net = MaskedNet.initialize(REFERENCE_SIZES, seed=REFERENCE_NET_SEED)
    trainer = Trainer(net, reference_data, reference_config())
    trainer.pretrain()
    acc = net.accuracy(reference_data.val_x, reference_data.val_y)
    return net, acc


@pytest.fixture()
def small_blobs():
    return generate_dataset("blobs", n=240, classes=2, noise=0.3, seed=11)


@pytest.fixture()
def small_spirals():
    return generate_dataset("spirals", n=400, classes=2, noise=0.08, seed=5)


def train_small_net(data, sizes=(2, 16, 2), seed=2, epochs=30, eta_w=0.3):
    """A quick dense net for oracle tests; returns the trained net."""
    net = MaskedNet.initialize(sizes, seed=seed)
    cfg = TrainConfig(pretrain_epochs=epochs, batch_size=50, seed=seed,
                      eta_w_start=eta_w, momentum=0.9)
    trainer = Trainer(net, data, cfg)
    trainer.pretrain()
    return net


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
