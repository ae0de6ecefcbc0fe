"""Versioned binary checkpoint format for parameter vectors.

Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON header
(config echo plus segment table), then the flat values as little-endian f64.
Round trips are byte-identical.
"""

import json
import struct
from dataclasses import asdict

import numpy as np

from .model import ModelConfig, ParamVector, build_layout

MAGIC = b"SUSCKPT\x00"
VERSION = 1


def save_checkpoint(params: ParamVector, path):
    layout, _ = build_layout(params.config)
    header = {
        "config": asdict(params.config),
        "segments": [[name, list(shape), off] for name, shape, off in layout],
        "n_values": int(params.size),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(str(path), "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamVector:
    with open(str(path), "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version = struct.unpack("<I", f.read(4))[0]
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        hlen = struct.unpack("<Q", f.read(8))[0]
        header = json.loads(f.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["config"])
        values = np.frombuffer(f.read(), dtype="<f8").copy()
    if values.size != header["n_values"]:
        raise ValueError("checkpoint payload truncated")
    layout, _ = build_layout(config)
    stored = [[name, list(shape), off] for name, shape, off in layout]
    if stored != header["segments"]:
        raise ValueError("segment table does not match config layout")
    return ParamVector(config, values.astype(config.dtype))
