"""Binary checkpoints of the transport network's parameters.

Layout, all integers little-endian::

    b"STEINMP\\0"               8-byte magic
    uint32 version
    uint32 n                   byte length of the config JSON
    n bytes                    canonical JSON (sorted keys, no spaces) of the ModelConfig
    float64[...]               every parameter array, C order, in declaration order

A human-readable sidecar ``<path>.json`` holds the config and the loss
history sampled every ``HISTORY_EVERY`` steps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .nn import ModelConfig, param_shapes

MAGIC = b"STEINMP\0"
VERSION = 1
HISTORY_EVERY = 100
_LE_F8 = np.dtype("<f8")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save(path, params: dict[str, np.ndarray], config: ModelConfig, loss_trace=None) -> None:
    path = Path(path)
    shapes = param_shapes(config)
    if set(params) != set(shapes):
        raise ConfigError("parameter names do not match the model config")
    header = canonical_json(config.to_dict()).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}", key=name)
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F8).tobytes())
    if loss_trace is not None:
        history = [[i, float(v)] for i, v in enumerate(loss_trace) if i % HISTORY_EVERY == 0]
        sidecar = {"model": config.to_dict(), "format_version": VERSION, "loss_history": history}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise ParseError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig(**json.loads(data[16 : 16 + n].decode()))
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{path}: bad config header: {exc}") from None
    offset = 16 + n
    params = {}
    for name, shape in param_shapes(config).items():
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise ParseError(f"{path}: truncated while reading {name}")
        params[name] = np.frombuffer(data, dtype=_LE_F8, count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise ParseError(f"{path}: {len(data) - offset} trailing bytes")
    return params, config
