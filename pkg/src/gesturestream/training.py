"""Mini-batch Adam training of the batch model with plateau LR halving and early stopping."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DataError, LabelError
from .model import GestureModel, is_weight
from .skeleton import MovingParams, random_moving_frames
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    initial_lr: float = 1e-3
    lr_reduce_factor: float = 2.0
    lr_patience: int = 5
    early_stop_patience: int = 25
    loss_min_delta: float = 1e-4
    l1_coeff: float = 1e-5
    l2_coeff: float = 1e-4
    max_epochs: int = 500
    augment: bool = True
    max_rotation: float = 0.3
    max_scale_delta: float = 0.2
    max_translation: float = 0.1
    noise_sigma: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.initial_lr <= 0 or self.lr_reduce_factor <= 1:
            raise ConfigError("initial_lr must be > 0 and lr_reduce_factor > 1")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be integers >= 1")
        if min(self.l1_coeff, self.l2_coeff, self.noise_sigma, self.loss_min_delta) < 0:
            raise ConfigError("regularisation, noise and min_delta must be nonnegative")

    @property
    def moving(self) -> MovingParams:
        return MovingParams(self.max_rotation, self.max_scale_delta, self.max_translation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def __len__(self):
        return len(self.train_loss)


class PlateauSchedule:
    """Halve the learning rate after ``lr_patience`` epochs without validation-loss
    improvement; stop after ``early_stop_patience`` epochs without validation-accuracy
    improvement.

    Loss improves when it drops below ``best * (1 - min_delta)``; accuracy must
    strictly increase.
    """

    def __init__(self, initial_lr: float, factor: float = 2.0, lr_patience: int = 5,
                 early_stop_patience: int = 25, min_delta: float = 1e-4):
        self.lr = initial_lr
        self.factor = factor
        self.lr_patience = lr_patience
        self.early_stop_patience = early_stop_patience
        self.min_delta = min_delta
        self.best_loss = np.inf
        self.best_accuracy = -np.inf
        self.best_epoch = -1
        self.stagnant = 0
        self.epoch = -1

    def step(self, val_loss: float, val_accuracy: float) -> bool:
        """Record one epoch; returns True when accuracy improved (a new best)."""
        self.epoch += 1
        if val_loss < self.best_loss * (1.0 - self.min_delta) or not np.isfinite(self.best_loss):
            self.best_loss = val_loss
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant >= self.lr_patience:
                self.lr /= self.factor
                self.stagnant = 0
        improved = val_accuracy > self.best_accuracy
        if improved:
            self.best_accuracy = val_accuracy
            self.best_epoch = self.epoch
        return improved

    @property
    def should_stop(self) -> bool:
        return self.epoch - self.best_epoch >= self.early_stop_patience


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.params[name].data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def regularization(params: Mapping[str, Tensor], l1: float, l2: float) -> Tensor:
    """``l1 * sum|w| + l2 * sum w^2`` over weight matrices only."""
    total = Tensor(0.0)
    for name, p in params.items():
        if not is_weight(name):
            continue
        if l1:
            total = T.add(total, T.scale(T.sum_(T.abs_(p)), l1))
        if l2:
            total = T.add(total, T.scale(T.sum_(T.mul(p, p)), l2))
    return total


def loss(probs, labels, params: Mapping[str, Tensor], config: TrainConfig, num_classes: int | None = None) -> Tensor:
    """Mean ``-log p[label]`` plus L1/L2 penalties on weight matrices."""
    probs = T.as_tensor(probs)
    labels = np.atleast_1d(np.asarray(labels))
    if probs.ndim == 1:
        probs = T.reshape(probs, (1, -1))
    k = probs.shape[-1] if num_classes is None else num_classes
    if labels.dtype.kind not in "iu" or (labels < 0).any() or (labels >= k).any():
        raise LabelError(f"labels must be integers in [0, {k})")
    return T.add(T.nll(probs, labels), regularization(params, config.l1_coeff, config.l2_coeff))


def _check_labels(y, num_classes):
    y = np.asarray(y)
    if y.dtype.kind not in "iu" or (y < 0).any() or (y >= num_classes).any():
        raise LabelError(f"labels must be integers in [0, {num_classes})")
    return y.astype(np.int64)


def augment_batch(x: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(x)
    moving = config.moving
    for i in range(len(x)):
        out[i] = random_moving_frames(x[i], moving, rng)
    if config.noise_sigma:
        out += rng.normal(0.0, config.noise_sigma, size=out.shape)
    return out


def evaluate_windows(model: GestureModel, x: np.ndarray, y: np.ndarray, batch_size: int = 64):
    """(mean cross-entropy, accuracy) on preprocessed windows."""
    total, correct = 0.0, 0
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            logits = model.forward(Tensor(x[i:i + batch_size]))
            yb = y[i:i + batch_size]
            total += T.cross_entropy(logits, yb).item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total / len(x), correct / len(x)


def train_step(model: GestureModel, xb: np.ndarray, yb: np.ndarray, config: TrainConfig,
               rng: np.random.Generator):
    """Loss value and named gradients for one mini-batch (dropout active)."""
    params = model.params
    for p in params.values():
        p.requires_grad = True
    with Tape() as tape:
        logits = model.forward(Tensor(xb), train=True, rng=rng)
        obj = T.add(T.cross_entropy(logits, yb), regularization(params, config.l1_coeff, config.l2_coeff))
    grads = tape.backward(obj)
    named = {name: grads[p] for name, p in params.items() if p in grads}
    return obj.item(), named


def train(model: GestureModel, x_train, y_train, x_val=None, y_val=None,
          config: TrainConfig | None = None, callback=None):
    """Train ``model`` in place and restore the best-validation-accuracy parameters.

    ``x_*`` are raw windows ``(N, gamma, lambda, 3)`` and ``y_*`` integer class
    indices. Without a validation set the training windows are used for
    validation. Returns ``(model, TrainHistory)``.
    """
    config = config or TrainConfig()
    if x_train is None or len(x_train) == 0:
        raise DataError("training set is empty")
    k = model.config.num_classes
    y_train = _check_labels(y_train, k)
    x_train = model.preprocess(x_train)
    if len(x_train) != len(y_train):
        raise DataError("training windows and labels differ in count")
    if x_val is None or len(x_val) == 0:
        x_val, y_val = x_train, y_train
    else:
        x_val, y_val = model.preprocess(x_val), _check_labels(y_val, k)

    rng = np.random.default_rng(config.seed)
    schedule = PlateauSchedule(config.initial_lr, config.lr_reduce_factor, config.lr_patience,
                               config.early_stop_patience, config.loss_min_delta)
    opt = Adam(model.params, config.initial_lr)
    history = TrainHistory()
    best_state = model.state_dict()
    try:
        for epoch in range(config.max_epochs):
            opt.lr = schedule.lr
            order = rng.permutation(len(x_train))
            running, seen = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                xb = augment_batch(x_train[idx], config, rng) if config.augment else x_train[idx]
                value, grads = train_step(model, xb, y_train[idx], config, rng)
                opt.step(grads)
                running += value * len(idx)
                seen += len(idx)
            val_loss, val_acc = evaluate_windows(model, x_val, y_val)
            history.train_loss.append(running / seen)
            history.val_loss.append(val_loss)
            history.val_accuracy.append(val_acc)
            history.learning_rate.append(opt.lr)
            if schedule.step(val_loss, val_acc):
                best_state = model.state_dict()
            log.info("epoch %d loss %.4f val_loss %.4f val_acc %.4f lr %.2e",
                     epoch, running / seen, val_loss, val_acc, opt.lr)
            if callback is not None:
                callback(epoch, history)
            if schedule.should_stop:
                history.stopped_early = True
                break
    finally:
        for p in model.params.values():
            p.requires_grad = False
    history.best_epoch = schedule.best_epoch
    model.load_state_dict(best_state)
    return model, history
