"""Binary checkpoint format (version 1).

Layout, all integers little-endian::

    8 bytes   magic b"LRNMTCKP"
    u32       format version (1)
    u32       header length H
    H bytes   UTF-8 JSON header: model_config, update, valid_loss, adam_step, extra
    u32       tensor count N
    N times:
      u16     name length, then the UTF-8 name
      u8      ndim, then ndim x u32 dimensions
      data    float32 little-endian, C order

Model parameters are stored under their own names; Adam moments under
``optim.exp_avg.<name>`` and ``optim.exp_avg_sq.<name>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, Seq2SeqModel

MAGIC = b"LRNMTCKP"
VERSION = 1
_M_PREFIX = "optim.exp_avg."
_V_PREFIX = "optim.exp_avg_sq."


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: v.copy() for k, v in self.exp_avg.items()},
                         {k: v.copy() for k, v in self.exp_avg_sq.items()})


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    update: int
    optimizer: AdamState = field(default_factory=AdamState)
    valid_loss: float | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Seq2SeqModel, update: int, optimizer: AdamState | None = None,
                   valid_loss: float | None = None, extra: dict | None = None) -> "Checkpoint":
        return cls(model.config, {n: p.copy() for n, p in model.params.items()}, update,
                   optimizer.copy() if optimizer is not None else AdamState(),
                   valid_loss, dict(extra or {}))

    def to_model(self, dtype=np.float32) -> Seq2SeqModel:
        return Seq2SeqModel(self.config, {n: p.astype(dtype, copy=True)
                                          for n, p in self.params.items()})


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "model_config": ckpt.config.to_dict(),
        "update": ckpt.update,
        "valid_loss": ckpt.valid_loss,
        "adam_step": ckpt.optimizer.step,
        "extra": ckpt.extra,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = list(ckpt.params.items())
    tensors += [(_M_PREFIX + k, v) for k, v in ckpt.optimizer.exp_avg.items()]
    tensors += [(_V_PREFIX + k, v) for k, v in ckpt.optimizer.exp_avg_sq.items()]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, arr)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off: off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off: off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        arr = arr.astype(np.float32)
        off += 4 * size
        if name.startswith(_V_PREFIX):
            v[name[len(_V_PREFIX):]] = arr
        elif name.startswith(_M_PREFIX):
            m[name[len(_M_PREFIX):]] = arr
        else:
            params[name] = arr
    return Checkpoint(ModelConfig.from_dict(header["model_config"]), params, header["update"],
                      AdamState(header["adam_step"], m, v), header["valid_loss"],
                      header.get("extra", {}))
