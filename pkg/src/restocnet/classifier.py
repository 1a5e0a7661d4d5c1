"""Full-precision MLP head: ReLU hidden layers, softmax output, Adam.

Trained with mean cross-entropy on fixed activation vectors.  Dropout is
inverted (scaled at train time) and applied to hidden activations only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod


@dataclass
class MlpModel:
    weights: list  # W[l] has shape (fan_in, fan_out)
    biases: list
    p_drop: float = 0.5

    @property
    def dims(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.p_drop)


def init_mlp(dims, gen: np.random.Generator, p_drop: float = 0.5) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) <= 0:
        raise ValueError(f"invalid layer dims {dims}")
    if not 0.0 <= p_drop < 1.0:
        raise ValueError("p_drop must lie in [0, 1)")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(gen.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, p_drop)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass
class ForwardCache:
    inputs: list  # input to each layer
    masks: list  # dropout scale applied to each hidden output (None in eval)
    pre: list  # pre-activations of hidden layers
    logits: np.ndarray = None


def forward(model: MlpModel, x: np.ndarray, train: bool = False,
            gen: np.random.Generator | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Class probabilities for a batch, plus the intermediates for ``backward``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ValueError(f"expected input (B, {model.dims[0]}), got {x.shape}")
    cache = ForwardCache([], [], [])
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        if l == last:
            cache.logits = z
            break
        cache.pre.append(z)
        h = np.maximum(z, 0.0)
        mask = None
        if train and model.p_drop > 0:
            if gen is None:
                raise ValueError("training-mode dropout needs a generator")
            keep = 1.0 - model.p_drop
            mask = (gen.random(h.shape) < keep) / keep
            h = h * mask
        cache.masks.append(mask)
    return softmax(cache.logits), cache


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = _check_labels(labels, logits.shape[1])
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels


def backward(model: MlpModel, cache: ForwardCache, labels: np.ndarray) -> list:
    """Gradients of mean cross-entropy, ordered like ``model.params()``."""
    labels = _check_labels(labels, cache.logits.shape[1])
    n = len(labels)
    delta = softmax(cache.logits)
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    gw = [None] * len(model.weights)
    gb = [None] * len(model.biases)
    for l in range(len(model.weights) - 1, -1, -1):
        gw[l] = cache.inputs[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l == 0:
            break
        delta = delta @ model.weights[l].T
        if cache.masks[l - 1] is not None:
            delta = delta * cache.masks[l - 1]
        delta = delta * (cache.pre[l - 1] > 0)
    return gw + gb


@dataclass
class AdamState:
    lr: float = 1.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(model: MlpModel, lr: float = 1.5e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    params = model.params()
    return AdamState(lr, betas[0], betas[1], eps, 0,
                     [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(model: MlpModel, grads: list, state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``model`` and ``state``."""
    params = model.params()
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameters")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def predict(model: MlpModel, x: np.ndarray, batch: int = 4096) -> np.ndarray:
    out = [forward(model, x[i:i + batch])[0].argmax(axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class TrainConfig:
    hidden: tuple = ()
    n_classes: int = 10
    lr: float = 1.5e-3
    batch_size: int = 256
    epochs: int = 100
    p_drop: float = 0.5


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float = float("nan")


def train_classifier(x: np.ndarray, y: np.ndarray, config: TrainConfig, seed: int,
                     x_test: np.ndarray | None = None, y_test: np.ndarray | None = None,
                     log_path: str | Path | None = None, model: MlpModel | None = None,
                     progress=None) -> tuple[MlpModel, list]:
    """Train on fixed activations; returns the model and per-epoch metrics.

    Initialization, per-epoch shuffles and dropout masks draw from separate
    streams so the whole trajectory is a function of ``seed``.  The recorded
    loss is the mean mini-batch loss of the epoch (with dropout active).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(x) != len(y):
        raise ValueError("activations and labels differ in length")
    if model is None:
        dims = (x.shape[1], *config.hidden, config.n_classes)
        model = init_mlp(dims, rng_mod.stream(seed, rng_mod.CLASSIFIER_INIT), config.p_drop)
    opt = adam_init(model, config.lr)
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "train_accuracy", "test_accuracy"])
    try:
        for epoch in range(config.epochs):
            order = rng_mod.stream(seed, rng_mod.CLASSIFIER_SHUFFLE, epoch).permutation(len(x))
            drop = rng_mod.stream(seed, rng_mod.CLASSIFIER_DROPOUT, epoch)
            losses, sizes = [], []
            for lo in range(0, len(x), config.batch_size):
                idx = order[lo:lo + config.batch_size]
                _, cache = forward(model, x[idx], train=True, gen=drop)
                losses.append(cross_entropy(cache.logits, y[idx]))
                sizes.append(len(idx))
                adam_step(model, backward(model, cache, y[idx]), opt)
            loss = float(np.average(losses, weights=sizes))
            train_acc = float((predict(model, x) == y).mean())
            test_acc = float("nan")
            if x_test is not None and len(x_test):
                test_acc = float((predict(model, x_test) == np.asarray(y_test)).mean())
            m = EpochMetrics(epoch + 1, loss, train_acc, test_acc)
            history.append(m)
            if writer is not None:
                writer.writerow([m.epoch, repr(m.loss), repr(m.train_accuracy), repr(m.test_accuracy)])
                fh.flush()
            if progress is not None:
                progress(m)
    finally:
        if fh is not None:
            fh.close()
    return model, history


def model_to_arrays(model: MlpModel) -> list:
    """Flatten into the (weight, bias) list stored in checkpoints."""
    return [(w, b) for w, b in zip(model.weights, model.biases)]


def model_from_arrays(pairs, p_drop: float = 0.5) -> MlpModel:
    return MlpModel([np.asarray(w, dtype=np.float64) for w, _ in pairs],
                    [np.asarray(b, dtype=np.float64) for _, b in pairs], p_drop)
