"""
Shared fixtures: small hand-made networks, samples and datasets.
"""

import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from src.config import ExperimentConfig
from src.data import synth_blobs
from src.nn import DenseLayer, Network, Sample


def build_net(hidden_widths, input_dim=2, class_count=2, seed=0, scale=1.0, mask_inputs=False):
    """Random relu network with identity output layer."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden_widths, class_count]
    layers = []
    for k in range(len(dims) - 1):
        last = k == len(dims) - 2
        layers.append(
            DenseLayer(
                weights=scale * rng.normal(size=(dims[k + 1], dims[k])),
                biases=0.1 * rng.normal(size=dims[k + 1]),
                activation="identity" if last else "relu",
            )
        )
    return Network(tuple(layers), mask_inputs=mask_inputs)


def write_idx(path: Path, magic: int, dims, payload: bytes, compress: bool = False) -> Path:
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    data = header + payload
    if compress:
        data = gzip.compress(data)
    path.write_bytes(data)
    return path


@pytest.fixture
def make_net():
    """Factory for random tiny networks."""
    return build_net


@pytest.fixture
def tiny_net():
    """N0 = 6: hidden widths (4, 2) on 2 inputs, 2 classes."""
    return build_net((4, 2), seed=3)


@pytest.fixture
def tiny_sample():
    return Sample(np.array([0.4, -0.9]), 1)


@pytest.fixture
def two_unit_net():
    """One hidden layer of 2 relu units with small integer weights.

    h = relu([x0 + x1, x0 - 2 x1] + [0, 1]);  logits = [[1, 2], [-1, 1]] h + [0.5, -0.5]
    """
    return Network(
        (
            DenseLayer(np.array([[1.0, 1.0], [1.0, -2.0]]), np.array([0.0, 1.0]), "relu"),
            DenseLayer(np.array([[1.0, 2.0], [-1.0, 1.0]]), np.array([0.5, -0.5]), "identity"),
        )
    )


@pytest.fixture
def blobs():
    """Separable 2-class blobs without label noise."""
    return synth_blobs(200, 2, noise_sigma=0.5, label_noise_rate=0.0, seed=7)


@pytest.fixture
def noisy_blobs():
    return synth_blobs(200, 2, noise_sigma=0.5, label_noise_rate=0.1, seed=7)


@pytest.fixture
def idx_files(tmp_path):
    """Ten 2x2 images; byte 16 of the image file (first pixel) is 255."""
    pixels = bytearray(range(40))
    pixels[0] = 255
    images = write_idx(tmp_path / "images.idx", 0x00000803, (10, 2, 2), bytes(pixels))
    labels = write_idx(tmp_path / "labels.idx", 0x00000801, (10,), bytes(i % 3 for i in range(10)))
    return images, labels


@pytest.fixture
def quick_config(tmp_path):
    """A minimal synthetic experiment that runs in a couple of seconds."""
    return ExperimentConfig(
        train_size=60,
        test_size=24,
        hidden_widths=(6,),
        epochs=5,
        transitions=300,
        burn_in=20,
        mc_samples=200,
        ensemble_size=2,
        rejection_quantiles=(0.1,),
        output_dir=str(tmp_path / "run"),
    )
