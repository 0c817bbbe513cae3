"""Binary model checkpoints.

Layout: magic b"DGNN", a little-endian u32 format version, a u32-length
JSON header (model configuration, target name, transform state, seed and
best-epoch metadata, and the parameter name/shape table), followed by the
raw little-endian float64 parameter payload in table order. Round trips
are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams
from .preprocess import TargetTransform

MAGIC = b"DGNN"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    target: str
    seed: int
    best_epoch: int
    best_val_mae: float
    transform: TargetTransform
    values: dict[str, np.ndarray]

    def build_params(self) -> ModelParams:
        params = ModelParams.initialize(self.model_config, seed=0)
        params.load_values(self.values)
        return params

    def to_bytes(self) -> bytes:
        table = [[name, list(arr.shape)] for name, arr in self.values.items()]
        header = {
            "model_config": self.model_config.to_dict(),
            "target": self.target,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_val_mae": self.best_val_mae,
            "transform": self.transform.state(),
            "params": table,
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header_bytes)), header_bytes]
        for name, _ in table:
            arr = np.ascontiguousarray(self.values[name], dtype="<f8")
            chunks.append(arr.tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise ValueError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        version = struct.unpack("<I", data[4:8])[0]
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        header_len = struct.unpack("<I", data[8:12])[0]
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
        offset = 12 + header_len
        values: dict[str, np.ndarray] = {}
        for name, shape in header["params"]:
            shape = tuple(shape)
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 8
            arr = np.frombuffer(data[offset:offset + nbytes], dtype="<f8").reshape(shape)
            values[name] = arr.astype(np.float64)
            offset += nbytes
        if offset != len(data):
            raise ValueError(f"trailing bytes in checkpoint ({len(data) - offset})")
        return cls(
            model_config=ModelConfig.from_dict(header["model_config"]),
            target=header["target"],
            seed=header["seed"],
            best_epoch=header["best_epoch"],
            best_val_mae=header["best_val_mae"],
            transform=TargetTransform.from_state(header["transform"]),
            values=values,
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
