"""Named-tensor weight archives.

Layout (all integers little-endian)::

    b"CSNC"                      magic
    u32   format_version
    u32   config length, then that many bytes of UTF-8 JSON
    repeated until EOF:
        u32  name length, name bytes (UTF-8)
        u32  rank
        u64  extent * rank
        f32  data, row-major
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"CSNC"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<II", self.format_version, len(cfg)), cfg]
        for name in sorted(self.tensors):
            arr = np.array(self.tensors[name], dtype="<f4", order="C")  # keeps rank 0
            key = name.encode()
            parts.append(struct.pack("<I", len(key)))
            parts.append(key)
            parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise CheckpointError("bad magic; not a checkpoint file")
        try:
            version, cfg_len = struct.unpack_from("<II", buf, 4)
            pos = 12
            config = json.loads(buf[pos : pos + cfg_len].decode())
            pos += cfg_len
            tensors: dict[str, np.ndarray] = {}
            while pos < len(buf):
                (klen,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                name = buf[pos : pos + klen].decode()
                pos += klen
                (rank,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                shape = struct.unpack_from(f"<{rank}Q", buf, pos)
                pos += 8 * rank
                count = int(np.prod(shape, dtype=np.int64))
                arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
                pos += 4 * count
                if name in tensors:
                    raise CheckpointError(f"duplicate tensor name {name!r}")
                tensors[name] = arr.astype(np.float32)
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
        return cls(tensors=tensors, config=config, format_version=version)

    def save(self, path: str | Path) -> None:
        atomic_write(Path(path), self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def atomic_write(path: Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
