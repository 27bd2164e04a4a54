"""
Weight files.

Binary layout (little-endian)::

    offset  type     value
    0       4 bytes  b"TNLW"
    4       u32      format version (1)
    8       u32      layer count
    then per layer:
            u32      in_dim
            u32      out_dim
            u8       activation tag (0 identity, 1 relu)
            f64[]    weights, row-major (out_dim x in_dim)
            f64[]    biases (out_dim)

The JSON mirror uses the same field names.
"""

import json
import struct
from pathlib import Path
from typing import Any

import aiofiles
import numpy as np

from .errors import FormatError
from .nn import ACTIVATIONS, DenseLayer, Network

MAGIC = b"TNLW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_LAYER = struct.Struct("<IIB")


def encode_weights(net: Network) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(_LAYER.pack(layer.in_dim, layer.out_dim, ACTIVATIONS.index(layer.activation)))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_weights(data: bytes, mask_inputs: bool = False) -> Network:
    if len(data) < _HEADER.size:
        raise FormatError("weight file shorter than its header", offset=len(data))
    magic, version, layer_count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    if layer_count == 0:
        raise FormatError("weight file declares no layers", offset=8)

    offset = _HEADER.size
    layers = []
    for _ in range(layer_count):
        if len(data) < offset + _LAYER.size:
            raise FormatError("truncated layer header", offset=offset)
        in_dim, out_dim, tag = _LAYER.unpack_from(data, offset)
        if tag >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation tag {tag}", offset=offset + 8)
        offset += _LAYER.size
        n_values = out_dim * in_dim + out_dim
        if len(data) < offset + 8 * n_values:
            raise FormatError("truncated layer parameters", offset=len(data))
        values = np.frombuffer(data, dtype="<f8", count=n_values, offset=offset).astype(np.float64)
        offset += 8 * n_values
        layers.append(
            DenseLayer(
                weights=values[: out_dim * in_dim].reshape(out_dim, in_dim),
                biases=values[out_dim * in_dim :],
                activation=ACTIVATIONS[tag],
            )
        )
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after the last layer", offset=offset)
    return Network(tuple(layers), mask_inputs=mask_inputs)


def weights_to_json(net: Network) -> dict[str, Any]:
    return {
        "magic": MAGIC.decode("ascii"),
        "version": FORMAT_VERSION,
        "layers": [
            {
                "in_dim": layer.in_dim,
                "out_dim": layer.out_dim,
                "activation": layer.activation,
                "weights": layer.weights.tolist(),
                "biases": layer.biases.tolist(),
            }
            for layer in net.layers
        ],
    }


def weights_from_json(payload: dict[str, Any], mask_inputs: bool = False) -> Network:
    if payload.get("magic") != MAGIC.decode("ascii"):
        raise FormatError(f"bad magic {payload.get('magic')!r} in JSON weights")
    if payload.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {payload.get('version')!r}")
    layers = []
    for k, entry in enumerate(payload.get("layers", [])):
        weights = np.array(entry["weights"], dtype=np.float64).reshape(entry["out_dim"], entry["in_dim"])
        if entry["activation"] not in ACTIVATIONS:
            raise FormatError(f"layer {k}: unknown activation {entry['activation']!r}")
        layers.append(DenseLayer(weights=weights, biases=entry["biases"], activation=entry["activation"]))
    return Network(tuple(layers), mask_inputs=mask_inputs)


def save_weights(net: Network, path: str | Path) -> None:
    """Write `net` as binary, or as the JSON mirror when `path` ends in .json."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        path.write_text(json.dumps(weights_to_json(net), indent=2), encoding="utf-8")
    else:
        path.write_bytes(encode_weights(net))


def load_weights(path: str | Path, mask_inputs: bool = False) -> Network:
    path = Path(path)
    if path.suffix == ".json":
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: {e.msg}", offset=e.pos) from e
        return weights_from_json(payload, mask_inputs=mask_inputs)
    return decode_weights(path.read_bytes(), mask_inputs=mask_inputs)


async def save_weights_async(net: Network, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "wb") as f:
        await f.write(encode_weights(net))


async def load_weights_async(path: str | Path, mask_inputs: bool = False) -> Network:
    async with aiofiles.open(path, "rb") as f:
        data = await f.read()
    return decode_weights(data, mask_inputs=mask_inputs)
