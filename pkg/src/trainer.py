"""
Minibatch SGD with momentum and inverted dropout.

Kept activations are scaled by 1/p while training, so the trained full
network is used for inference without any rescaling.
"""

import csv
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel

from .config import TrainConfig
from .data import Dataset
from .errors import NumericError, TrainingError
from .nn import DenseLayer, Network, cross_entropy_rows, forward_full_batch, sample_keep_bernoulli, softmax

logger = logging.getLogger(__name__)


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    train_accuracy: float


def init_network(
    config: TrainConfig, input_dim: int, class_count: int, rng: Optional[np.random.Generator] = None
) -> Network:
    """He-uniform relu hidden layers, Glorot-uniform output layer, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    dims = [input_dim, *config.hidden_widths, class_count]
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        hidden = k < len(dims) - 2
        limit = np.sqrt(6.0 / fan_in) if hidden else np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(
            DenseLayer(
                weights=rng.uniform(-limit, limit, size=(fan_out, fan_in)),
                biases=np.zeros(fan_out),
                activation="relu" if hidden else "identity",
            )
        )
    return Network(tuple(layers), mask_inputs=config.mask_inputs)


def mean_loss(net: Network, data: Dataset, labels: Optional[np.ndarray] = None) -> float:
    """Mean full-network cross-entropy against `labels` (default: the dataset labels)."""
    labels = data.labels if labels is None else labels
    return float(cross_entropy_rows(forward_full_batch(net, data.features), labels).mean())


def accuracy(net: Network, data: Dataset) -> float:
    predicted = forward_full_batch(net, data.features).argmax(axis=1)
    return float((predicted == data.labels).mean())


class Trainer:
    """Trains one network; `history` holds one record per epoch, epoch 0
    being the freshly initialised network."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.history: list[EpochRecord] = []

    def fit(self, data: Dataset) -> Network:
        config = self.config
        rng = np.random.default_rng(config.seed)
        net = init_network(config, data.feature_dim, data.class_count, rng)
        weights = [layer.weights.copy() for layer in net.layers]
        biases = [layer.biases.copy() for layer in net.layers]
        velocity_w = [np.zeros_like(w) for w in weights]
        velocity_b = [np.zeros_like(b) for b in biases]

        self.history = [self._record(0, net, data)]
        n = len(data)
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                batch = order[start : start + config.batch_size]
                grad_w, grad_b = self._gradients(
                    weights, biases, data.features[batch], data.labels[batch], rng
                )
                for k in range(len(weights)):
                    velocity_w[k] = config.momentum * velocity_w[k] - config.learning_rate * grad_w[k]
                    velocity_b[k] = config.momentum * velocity_b[k] - config.learning_rate * grad_b[k]
                    weights[k] += velocity_w[k]
                    biases[k] += velocity_b[k]
            try:
                net = self._build(net, weights, biases)
            except NumericError as e:
                raise TrainingError(f"training diverged: {e}", epoch=epoch, seed=config.seed) from e
            record = self._record(epoch, net, data)
            self.history.append(record)
            logger.debug(
                "epoch %d: loss %.4f, accuracy %.3f", epoch, record.train_loss, record.train_accuracy
            )
        logger.info(
            "Trained %s net for %d epochs (seed %d): loss %.4f -> %.4f",
            config.hidden_widths,
            config.epochs,
            config.seed,
            self.history[0].train_loss,
            self.history[-1].train_loss,
        )
        return net

    def _record(self, epoch: int, net: Network, data: Dataset) -> EpochRecord:
        try:
            loss = mean_loss(net, data)
        except NumericError as e:
            raise TrainingError(f"training diverged: {e}", epoch=epoch, seed=self.config.seed) from e
        if not np.isfinite(loss):
            raise TrainingError("training loss is not finite", epoch=epoch, seed=self.config.seed)
        return EpochRecord(epoch=epoch, train_loss=loss, train_accuracy=accuracy(net, data))

    @staticmethod
    def _build(template: Network, weights: list[np.ndarray], biases: list[np.ndarray]) -> Network:
        layers = tuple(
            DenseLayer(weights=w.copy(), biases=b.copy(), activation=layer.activation)
            for w, b, layer in zip(weights, biases, template.layers)
        )
        return Network(layers, mask_inputs=template.mask_inputs)

    def _gradients(
        self,
        weights: list[np.ndarray],
        biases: list[np.ndarray],
        inputs: np.ndarray,
        labels: np.ndarray,
        rng: np.random.Generator,
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        p = self.config.dropout_p
        scale = 1.0 / p
        last = len(weights) - 1

        a = inputs
        if self.config.mask_inputs:
            a = np.where(sample_keep_bernoulli(a.shape, p, rng), a * scale, 0.0)
        layer_inputs = [a]
        pre_activations = []
        keeps = []
        for k in range(last + 1):
            z = a @ weights[k].T + biases[k]
            if k == last:
                break
            pre_activations.append(z)
            keep = sample_keep_bernoulli(z.shape, p, rng)
            keeps.append(keep)
            a = np.where(keep, np.maximum(z, 0.0) * scale, 0.0)
            layer_inputs.append(a)

        delta = softmax(z)
        delta[np.arange(len(labels)), labels] -= 1.0
        delta /= len(labels)
        grad_w = [np.empty(0)] * len(weights)
        grad_b = [np.empty(0)] * len(weights)
        for k in range(last, -1, -1):
            grad_w[k] = delta.T @ layer_inputs[k]
            grad_b[k] = delta.sum(axis=0)
            if k > 0:
                upstream = np.where(keeps[k - 1], (delta @ weights[k]) * scale, 0.0)
                delta = upstream * (pre_activations[k - 1] > 0)
        return grad_w, grad_b

    def log_rows(self) -> list[list[object]]:
        return [[r.epoch, repr(r.train_loss), repr(r.train_accuracy)] for r in self.history]

    def write_log(self, path: str | Path) -> None:
        """Per-epoch CSV log: epoch, train_loss, train_accuracy."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "train_accuracy"])
            writer.writerows(self.log_rows())


def train(config: TrainConfig, data: Dataset) -> Network:
    return Trainer(config).fit(data)
