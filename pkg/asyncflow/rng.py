"""Named, splittable random streams.

All randomness goes through numpy's counter-based Philox generator. A stream
is addressed by ``(seed, purpose, index, ...)`` so that trajectory ``i`` of
iteration ``j`` draws the same numbers no matter how many other streams were
consumed before it, which is what makes resumed runs and re-runs identical.
"""
from __future__ import annotations

import zlib
from typing import Any, Dict, Union

import numpy as np
import torch

Key = Union[int, str]


def _key_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def stream(seed: int, *keys: Key) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def torch_generator(seed: int, *keys: Key) -> torch.Generator:
    """A torch generator seeded from the matching numpy stream (used for weight init)."""
    gen = torch.Generator()
    gen.manual_seed(int(stream(seed, *keys).integers(0, 2**63 - 1)))
    return gen


def describe_state(gen: np.random.Generator) -> Dict[str, Any]:
    """JSON-friendly snapshot of a generator's bit-generator state."""
    def _plain(value):
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, dict):
            return {k: _plain(v) for k, v in value.items()}
        if isinstance(value, np.integer):
            return int(value)
        return value

    return _plain(gen.bit_generator.state)
