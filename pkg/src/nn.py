"""
Dense feedforward networks with explicit dropout masks.

A mask is a boolean keep-vector over the network's maskable units: the
hidden units of every hidden layer, concatenated in network order (and,
when `mask_inputs` is set, the input units in front of them). A dropped
unit outputs exactly 0.0, which removes its outgoing connections.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

Activation = Literal["relu", "identity"]
ACTIVATIONS: tuple[str, ...] = ("identity", "relu")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray
    activation: Activation = "relu"

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        biases = np.array(self.biases, dtype=np.float64)
        if weights.ndim != 2:
            raise ShapeError(f"weights must be a matrix, got shape {weights.shape}")
        if biases.shape != (weights.shape[0],):
            raise ShapeError(
                f"biases shape {biases.shape} does not match out_dim {weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation '{self.activation}'")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(biases))):
            raise NumericError("layer parameters must be finite")
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "biases", _frozen(biases))

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DenseLayer):
            return NotImplemented
        return (
            self.activation == other.activation
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.biases, other.biases)
        )


@dataclass(frozen=True, eq=False)
class Network:
    """The full (unthinned) network. The last layer produces the logits."""

    layers: tuple[DenseLayer, ...]
    mask_inputs: bool = False
    _segments: tuple[slice, ...] = field(init=False, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise ShapeError(
                    f"layer {k} outputs {layers[k].out_dim} units but layer {k + 1} "
                    f"expects {layers[k + 1].in_dim}"
                )
        if layers[-1].out_dim < 2:
            raise ShapeError("the final layer must produce at least 2 class logits")
        object.__setattr__(self, "layers", layers)

        segments = []
        offset = 0
        if self.mask_inputs:
            segments.append(slice(0, layers[0].in_dim))
            offset = layers[0].in_dim
        for layer in layers[:-1]:
            segments.append(slice(offset, offset + layer.out_dim))
            offset += layer.out_dim
        object.__setattr__(self, "_segments", tuple(segments))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(layer.out_dim for layer in self.layers[:-1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Network):
            return NotImplemented
        return self.mask_inputs == other.mask_inputs and self.layers == other.layers


@dataclass(frozen=True, eq=False)
class DropoutMask:
    keep: np.ndarray

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool)
        if keep.ndim != 1:
            raise ShapeError(f"a mask is a bit vector, got shape {keep.shape}")
        object.__setattr__(self, "keep", _frozen(keep))

    @property
    def length(self) -> int:
        return int(self.keep.shape[0])

    @property
    def size(self) -> int:
        """Number of kept units (N)."""
        return int(np.count_nonzero(self.keep))

    @classmethod
    def all_keep(cls, n0: int) -> "DropoutMask":
        return cls(np.ones(n0, dtype=bool))

    @classmethod
    def all_drop(cls, n0: int) -> "DropoutMask":
        return cls(np.zeros(n0, dtype=bool))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DropoutMask):
            return NotImplemented
        return np.array_equal(self.keep, other.keep)

    def __hash__(self) -> int:
        return hash(self.keep.tobytes())


@dataclass(frozen=True, eq=False)
class Sample:
    features: np.ndarray
    label: int

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 1:
            raise ShapeError(f"features must be a vector, got shape {features.shape}")
        if not np.all(np.isfinite(features)):
            raise NumericError("sample features must be finite")
        if int(self.label) < 0:
            raise ParameterError(f"label {self.label} must be nonnegative")
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "label", int(self.label))


def count_maskable_units(net: Network) -> int:
    """N0: total hidden width, plus the input width when inputs are maskable."""
    return sum(s.stop - s.start for s in net._segments)


def mask_from_index(n0: int, index: int) -> DropoutMask:
    """Mask number `index` in counting order: bit j of the index keeps unit j."""
    return DropoutMask(masks_for_range(n0, index, index + 1)[0])


def masks_for_range(n0: int, start: int, stop: int) -> np.ndarray:
    """Keep-matrix (stop - start, n0) for consecutive mask indices."""
    indices = np.arange(start, stop, dtype=np.int64)
    return ((indices[:, None] >> np.arange(n0, dtype=np.int64)) & 1).astype(bool)


def mask_index(mask: DropoutMask) -> int:
    return sum(1 << j for j in np.flatnonzero(mask.keep).tolist())


def sample_keep_bernoulli(shape: int | tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep array, each entry kept independently with probability p.
    A (rows, n0) shape draws one mask per row."""
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"keep probability p={p} must lie in (0, 1]")
    return rng.random(shape) < p


def sample_mask_bernoulli(n0: int, p: float, rng: np.random.Generator) -> DropoutMask:
    return DropoutMask(sample_keep_bernoulli(n0, p, rng))


def sample_mask_fixed_size(n0: int, n: int, rng: np.random.Generator) -> DropoutMask:
    """Uniformly random mask among the C(n0, n) masks with exactly n kept units."""
    if not 0 <= n <= n0:
        raise ParameterError(f"mask size {n} must lie in [0, {n0}]")
    keep = np.zeros(n0, dtype=bool)
    keep[rng.choice(n0, size=n, replace=False)] = True
    return DropoutMask(keep)


def _check_input(net: Network, x: np.ndarray | Sequence[float]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ShapeError(f"input has shape {x.shape}, network expects ({net.input_dim},)")
    return x


def _check_keep(net: Network, mask: DropoutMask) -> np.ndarray:
    n0 = count_maskable_units(net)
    if mask.length != n0:
        raise ShapeError(f"mask length {mask.length} != maskable unit count {n0}")
    return mask.keep


def _activate(layer: DenseLayer, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if layer.activation == "relu" else z


def _drop(a: np.ndarray, keep: np.ndarray, scale: float) -> np.ndarray:
    if scale != 1.0:
        a = a * scale
    return np.where(keep, a, 0.0)


def _forward_keep(net: Network, keep: np.ndarray, x: np.ndarray, scale: float) -> np.ndarray:
    segments = net._segments
    a = x
    s = 0
    if net.mask_inputs:
        a = _drop(a, keep[segments[0]], scale)
        s = 1
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        a = _activate(layer, layer.weights @ a + layer.biases)
        if k < last:
            a = _drop(a, keep[segments[s]], scale)
            s += 1
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite activation in forward pass")
    return a


def forward(
    net: Network, mask: DropoutMask, x: np.ndarray | Sequence[float], scale: float = 1.0
) -> np.ndarray:
    """Logits of the thinned network selected by `mask`.

    `scale` multiplies every kept unit; 1/p gives the inverted-dropout
    training pass, 1 gives the thinned network itself.
    """
    return _forward_keep(net, _check_keep(net, mask), _check_input(net, x), scale)


def forward_full(net: Network, x: np.ndarray | Sequence[float]) -> np.ndarray:
    """Maskless forward pass of the full network."""
    a = _check_input(net, x)
    for layer in net.layers:
        a = _activate(layer, layer.weights @ a + layer.biases)
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite activation in forward pass")
    return a


def forward_full_batch(net: Network, inputs: np.ndarray) -> np.ndarray:
    """Maskless logits (n, class_count) for a matrix of inputs."""
    a = np.asarray(inputs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != net.input_dim:
        raise ShapeError(f"inputs have shape {a.shape}, network expects (n, {net.input_dim})")
    for layer in net.layers:
        a = _activate(layer, a @ layer.weights.T + layer.biases)
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite activation in forward pass")
    return a


def forward_masked_inputs(net: Network, mask: DropoutMask, inputs: np.ndarray) -> np.ndarray:
    """Logits (n, class_count) of one thinned network over a matrix of inputs."""
    keep = _check_keep(net, mask)
    a = np.asarray(inputs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != net.input_dim:
        raise ShapeError(f"inputs have shape {a.shape}, network expects (n, {net.input_dim})")
    segments = net._segments
    s = 0
    if net.mask_inputs:
        a = np.where(keep[segments[0]], a, 0.0)
        s = 1
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        a = _activate(layer, a @ layer.weights.T + layer.biases)
        if k < last:
            a = np.where(keep[segments[s]], a, 0.0)
            s += 1
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite activation in forward pass")
    return a


def forward_batch(
    net: Network, keep_matrix: np.ndarray, x: np.ndarray | Sequence[float], scale: float = 1.0
) -> np.ndarray:
    """Logits (M, class_count) of M thinned networks applied to one input."""
    x = _check_input(net, x)
    keep_matrix = np.asarray(keep_matrix, dtype=bool)
    n0 = count_maskable_units(net)
    if keep_matrix.ndim != 2 or keep_matrix.shape[1] != n0:
        raise ShapeError(f"keep matrix shape {keep_matrix.shape} incompatible with N0={n0}")
    m = keep_matrix.shape[0]
    segments = net._segments
    s = 0
    if net.mask_inputs:
        a = _drop(np.broadcast_to(x, (m, x.shape[0])), keep_matrix[:, segments[0]], scale)
        s = 1
    else:
        a = None
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        if a is None:
            z = np.broadcast_to(layer.weights @ x + layer.biases, (m, layer.out_dim))
        else:
            z = a @ layer.weights.T + layer.biases
        a = _activate(layer, z)
        if k < last:
            a = _drop(a, keep_matrix[:, segments[s]], scale)
            s += 1
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite activation in batched forward pass")
    return np.array(a)


def cross_entropy(logits: np.ndarray, y: int) -> float:
    """-log softmax(logits)[y] via log-sum-exp with max subtraction."""
    if not 0 <= y < logits.shape[0]:
        raise ParameterError(f"class index {y} out of range [0, {logits.shape[0]})")
    top = float(logits.max())
    lse = top + math.log(float(np.exp(logits - top).sum()))
    return lse - float(logits[y])


def cross_entropy_batch(logits: np.ndarray, y: int) -> np.ndarray:
    if not 0 <= y < logits.shape[1]:
        raise ParameterError(f"class index {y} out of range [0, {logits.shape[1]})")
    top = logits.max(axis=1)
    lse = top + np.log(np.exp(logits - top[:, None]).sum(axis=1))
    return lse - logits[:, y]


def cross_entropy_rows(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row loss where row i targets labels[i]."""
    top = logits.max(axis=1)
    lse = top + np.log(np.exp(logits - top[:, None]).sum(axis=1))
    return lse - logits[np.arange(logits.shape[0]), labels]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def loss(net: Network, mask: DropoutMask, x: np.ndarray | Sequence[float], y: int) -> float:
    return cross_entropy(forward(net, mask, x), y)


def predict_full(net: Network, x: np.ndarray | Sequence[float]) -> np.ndarray:
    """Class probabilities of the full network (inverted dropout: no rescaling)."""
    return softmax(forward_full(net, x))


class ThinnedEvaluator:
    """Loss of many thinned networks on one (input, target label) pair.

    The first layer's activation does not depend on the mask unless inputs
    are maskable, so it is computed once.
    """

    def __init__(self, net: Network, x: np.ndarray | Sequence[float], y: int):
        self.net = net
        self.x = _check_input(net, x)
        if not 0 <= y < net.class_count:
            raise ParameterError(f"class index {y} out of range [0, {net.class_count})")
        self.y = int(y)
        self.n0 = count_maskable_units(net)
        self._first: Optional[np.ndarray] = None
        if not net.mask_inputs and len(net.layers) > 1:
            first = net.layers[0]
            self._first = _activate(first, first.weights @ self.x + first.biases)

    def logits_keep(self, keep: np.ndarray) -> np.ndarray:
        if self._first is None:
            return _forward_keep(self.net, keep, self.x, 1.0)
        segments = self.net._segments
        a = np.where(keep[segments[0]], self._first, 0.0)
        layers = self.net.layers
        last = len(layers) - 1
        for k in range(1, len(layers)):
            layer = layers[k]
            a = _activate(layer, layer.weights @ a + layer.biases)
            if k < last:
                a = np.where(keep[segments[k]], a, 0.0)
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite activation in forward pass")
        return a

    def loss_keep(self, keep: np.ndarray) -> float:
        return cross_entropy(self.logits_keep(keep), self.y)

    def loss(self, mask: DropoutMask) -> float:
        return self.loss_keep(_check_keep(self.net, mask))

    def losses(self, keep_matrix: np.ndarray) -> np.ndarray:
        return cross_entropy_batch(forward_batch(self.net, keep_matrix, self.x), self.y)
