"""Binary checkpoint format.

Layout (all integers little-endian u32, data little-endian f64)::

    b"RSEG" | version | config_len | config text (UTF-8 key=value)
    | tensor_count | per tensor: name_len, name, rank, dims...
    | raw data of every tensor, in manifest order
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import DatasetIOError
from .tensor import Tensor
from .unet import ModelConfig, Network, layer_specs

MAGIC = b"RSEG"
FORMAT_VERSION = 1


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def encode(net: Network) -> bytes:
    parts = [MAGIC, _u32(FORMAT_VERSION)]
    config = net.config.to_text().encode("utf-8")
    parts += [_u32(len(config)), config, _u32(len(net.params))]
    for name, p in net.params.items():
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(p.data.ndim)]
        parts += [_u32(d) for d in p.data.shape]
    for p in net.params.values():
        parts.append(p.data.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetIOError(f"{self.path}: checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(data: bytes, path="<bytes>") -> Network:
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise DatasetIOError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise DatasetIOError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_text(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise DatasetIOError(f"{path}: unreadable model config ({exc})") from exc
    manifest = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        manifest.append((name, tuple(r.u32() for _ in range(rank))))
    params: Dict[str, Tensor] = {}
    for name, shape in manifest:
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True)
    if r.pos != len(data):
        raise DatasetIOError(f"{path}: trailing bytes after checkpoint data")
    expected = [f"{n}.{kind}" for n, *_ in layer_specs(config) for kind in ("weight", "bias")]
    if list(params) != expected:
        raise DatasetIOError(f"{path}: parameter names do not match the model config")
    return Network(config, params)


def save_checkpoint(path, net: Network) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(encode(net))
        os.replace(tmp, path)
    except OSError as exc:
        raise DatasetIOError(f"{path}: cannot write checkpoint") from exc


def load_checkpoint(path) -> Network:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"{path}: cannot read checkpoint") from exc
    return decode(data, path)
