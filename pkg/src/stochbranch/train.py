"""Loss, SGD and the epoch loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, Rng, ShapeError, as_tensor
from .data import Dataset, batches
from .layers import Mode
from .network import Network


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise DomainError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(b)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / b


@dataclass
class SGDConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 5

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise DomainError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise DomainError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise DomainError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if int(self.batch_size) < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if int(self.epochs) < 0:
            raise DomainError(f"epochs must be >= 0, got {self.epochs}")
        self.batch_size = int(self.batch_size)
        self.epochs = int(self.epochs)


@dataclass
class MetricRecord:
    epoch: int
    train_loss: float
    train_error: float
    test_error: float
    seconds: float


@dataclass
class TrainState:
    network: Network
    velocities: dict = field(default_factory=dict)
    epoch: int = 0
    metric_log: list = field(default_factory=list)

    def __post_init__(self):
        for name, layer, key in self.network.parameters():
            self.velocities.setdefault(name, np.zeros_like(layer.params[key]))


def sgd_step(state: TrainState, cfg: SGDConfig, grads=None):
    """v <- momentum*v + g + wd*w ; w <- w - lr*v.

    ``grads`` maps qualified parameter names to arrays and defaults to the
    gradients the layers stored during the last backward pass.
    """
    for name, layer, key in state.network.parameters():
        g = layer.grads[key] if grads is None else grads[name]
        w = layer.params[key]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient {g.shape} does not match parameter {w.shape}")
        v = state.velocities[name]
        v = cfg.momentum * v + g
        if cfg.weight_decay:
            v = v + cfg.weight_decay * w
        state.velocities[name] = v
        layer.params[key] = w - cfg.learning_rate * v
    return state


def train_step(network: Network, x, y, cfg: SGDConfig, state: TrainState, rng: Rng):
    logits = network.forward(x, Mode.TRAIN, rng)
    loss, grad = softmax_cross_entropy(logits, y)
    network.backward(grad)
    sgd_step(state, cfg)
    return loss


def evaluate(network: Network, ds: Dataset, batch_size=1000):
    """(mean loss, error rate) in EVAL mode. Touches no state."""
    if len(ds) == 0:
        return float("nan"), float("nan")
    total_loss = 0.0
    wrong = 0
    for x, y in batches(ds, batch_size, rng=None, shuffle=False):
        logits = network.forward(x, Mode.EVAL)
        loss, _ = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
        wrong += int(np.sum(logits.argmax(axis=1) != y))
    return total_loss / len(ds), wrong / len(ds)


def _train_batches(ds, batch_size, rng):
    # a lone trailing example joins the previous batch: batch norm cannot
    # normalise a batch of one
    pending = None
    for x, y in batches(ds, batch_size, rng):
        if pending is not None:
            if len(y) == 1:
                x, y = np.concatenate([pending[0], x]), np.concatenate([pending[1], y])
            else:
                yield pending
        pending = (x, y)
    if pending is not None:
        yield pending


def run_epoch(state: TrainState, train_ds: Dataset, test_ds: Dataset | None, cfg: SGDConfig, rng: Rng):
    """One pass over ``train_ds`` followed by EVAL-mode error measurement.

    Shuffling and mask sampling use separate forks of ``rng`` keyed by the
    epoch number, so results depend only on (seed, epoch, data, config).
    """
    if len(train_ds) == 0:
        raise DomainError("training set is empty")
    epoch_rng = rng.fork(f"epoch-{state.epoch}")
    shuffle_rng = epoch_rng.fork("shuffle")
    mask_rng = epoch_rng.fork("masks")
    start = time.perf_counter()
    losses = []
    for x, y in _train_batches(train_ds, cfg.batch_size, shuffle_rng):
        losses.append(train_step(state.network, x, y, cfg, state, mask_rng) * len(y))
    train_loss = float(np.sum(losses) / len(train_ds))
    _, train_error = evaluate(state.network, train_ds)
    test_error = evaluate(state.network, test_ds)[1] if test_ds is not None else float("nan")
    state.epoch += 1
    record = MetricRecord(state.epoch, train_loss, train_error, test_error, time.perf_counter() - start)
    state.metric_log.append(record)
    return state


def fit(network: Network, train_ds: Dataset, test_ds: Dataset | None, cfg: SGDConfig, rng: Rng, on_epoch=None):
    state = TrainState(network)
    for _ in range(cfg.epochs):
        run_epoch(state, train_ds, test_ds, cfg, rng)
        if on_epoch is not None:
            on_epoch(state.metric_log[-1])
    return state
