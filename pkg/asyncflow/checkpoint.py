"""Binary checkpoint files plus their JSON sidecar.

Layout (all integers unsigned 64-bit little-endian)::

    b"AFCKPT1"  entry_count
    per entry:  name_len  name(utf-8)  rank  extent_0 .. extent_{rank-1}  float64 data (LE)

The sidecar ``<file>.json`` holds the run config, the RNG stream keys and the
training counters needed to resume.
"""
from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np
import torch

from .exceptions import CheckpointError, VersionError
from .kernel import DTYPE

logger = logging.getLogger(__name__)

MAGIC = b"AFCKPT1"
FORMAT_VERSION = 1
_U64 = struct.Struct("<Q")

PathLike = Union[str, Path]


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path: PathLike, entries: Mapping[str, torch.Tensor], metadata: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, _U64.pack(len(entries))]
    for name, value in entries.items():
        array = np.ascontiguousarray(value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else value,
                                     dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(_U64.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U64.pack(array.ndim))
        chunks.extend(_U64.pack(extent) for extent in array.shape)
        chunks.append(array.tobytes(order="C"))
    path.write_bytes(b"".join(chunks))

    sidecar = {"format": FORMAT_VERSION, **metadata}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Wrote checkpoint %s (%d entries)", path, len(entries))
    return path


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.offset:end]
        self.offset = end
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(_U64.size))[0]


def load_checkpoint(path: PathLike) -> Tuple["OrderedDict[str, torch.Tensor]", Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise VersionError(f"{path}: not an asyncflow checkpoint (bad magic)")

    entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(reader.u64()):
        try:
            name = reader.take(reader.u64()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt entry name") from exc
        shape = tuple(reader.u64() for _ in range(reader.u64()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape)
        entries[name] = torch.tensor(data, dtype=DTYPE)
    if reader.offset != len(reader.blob):
        raise CheckpointError(f"{path}: trailing bytes after last entry")

    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointError(f"sidecar {side} is missing")
    metadata = json.loads(side.read_text(encoding="utf-8"))
    if metadata.get("format") != FORMAT_VERSION:
        raise VersionError(f"{side}: unsupported checkpoint format {metadata.get('format')!r}")
    return entries, metadata


def split_namespace(entries: Mapping[str, torch.Tensor], prefix: str) -> "OrderedDict[str, torch.Tensor]":
    """Entries whose name starts with ``prefix.``; names are kept intact."""
    return OrderedDict((name, value) for name, value in entries.items() if name.startswith(prefix + "."))
