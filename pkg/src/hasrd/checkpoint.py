"""Binary checkpoint container.

Layout (little-endian)::

    b"HSRD"  u16 format version  u8 stage tag
    u32 n  n bytes of UTF-8 "key=value" lines, sorted by key
    repeated until EOF, sorted by name:
        u16 n  n bytes UTF-8 name  u8 rank  rank x u32 dims  f32 payload

Config values are kept as strings so that loading and saving again
reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .validation import HASRDError

MAGIC = b"HSRD"
FORMAT_VERSION = 1
STAGES = {"mlm": 1, "codec": 2, "kmeans": 3}
_STAGE_NAMES = {v: k for k, v in STAGES.items()}


class CheckpointError(HASRDError):
    pass


@dataclass
class Checkpoint:
    stage: str
    config: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")
        self.config = {str(k): str(v) for k, v in self.config.items()}
        for k, v in self.config.items():
            if "=" in k or "\n" in k or "\n" in v:
                raise CheckpointError(f"config entry {k!r} cannot be serialized")
        # asarray rather than ascontiguousarray: the latter promotes 0-d arrays to 1-d
        self.tensors = {k: np.asarray(v, dtype=np.float32, order="C") for k, v in self.tensors.items()}

    # -- torch helpers -----------------------------------------------------
    def add_module(self, prefix: str, module: torch.nn.Module) -> None:
        for name, t in module.state_dict().items():
            self.tensors[f"{prefix}.{name}"] = t.detach().cpu().numpy().astype(np.float32)

    def load_module(self, prefix: str, module: torch.nn.Module, strict: bool = True) -> None:
        sd = {
            k[len(prefix) + 1 :]: torch.from_numpy(v.copy())
            for k, v in self.tensors.items()
            if k.startswith(prefix + ".")
        }
        if not sd:
            raise CheckpointError(f"checkpoint has no {prefix!r} tensors")
        try:
            module.load_state_dict(sd, strict=strict)
        except RuntimeError as e:
            raise CheckpointError(f"{prefix!r} tensors do not fit the module: {e}") from None

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    # -- serialization -----------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HB", FORMAT_VERSION, STAGES[self.stage])]
        cfg = "".join(f"{k}={self.config[k]}\n" for k in sorted(self.config)).encode("utf-8")
        parts.append(struct.pack("<I", len(cfg)) + cfg)
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            n = name.encode("utf-8")
            parts.append(struct.pack("<H", len(n)) + n)
            parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        def take(pos, n):
            if pos + n > len(buf):
                raise CheckpointError("unexpected EOF in checkpoint")
            return buf[pos : pos + n]

        if take(0, 4) != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        version, tag = struct.unpack("<HB", take(4, 3))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if tag not in _STAGE_NAMES:
            raise CheckpointError(f"unknown stage tag {tag}")
        (n,) = struct.unpack("<I", take(7, 4))
        config = {}
        for line in take(11, n).decode("utf-8").splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"malformed config line {line!r}")
            config[key] = value
        pos = 11 + n
        tensors = {}
        while pos < len(buf):
            (ln,) = struct.unpack("<H", take(pos, 2))
            name = take(pos + 2, ln).decode("utf-8")
            pos += 2 + ln
            (rank,) = struct.unpack("<B", take(pos, 1))
            dims = struct.unpack(f"<{rank}I", take(pos + 1, 4 * rank))
            pos += 1 + 4 * rank
            size = 4 * int(np.prod(dims, dtype=np.int64))
            tensors[name] = np.frombuffer(take(pos, size), dtype="<f4").reshape(dims).astype(np.float32)
            pos += size
        return cls(_STAGE_NAMES[tag], config, tensors)

    def save(self, path) -> int:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return len(data)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = Path(path)
        if not p.is_file():
            raise CheckpointError(f"checkpoint not found: {p}")
        return cls.from_bytes(p.read_bytes())


def module_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over every state tensor in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
