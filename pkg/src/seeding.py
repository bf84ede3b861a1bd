"""
Splittable seeds: master seed -> tuple -> repeat -> component.
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

PathPart = Union[int, str]

_MASK = (1 << 64) - 1


def _encode(part: PathPart) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & _MASK


def derive_seed(master: int, *path: PathPart) -> int:
    """
    Deterministic child seed for ``path`` under ``master``.

    derive_seed(7, "pilot", 3) is stable across runs and platforms, and
    distinct paths give independent streams.
    """
    seq = np.random.SeedSequence([int(master) & _MASK, *(_encode(p) for p in path)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def generator(master: int, *path: PathPart) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))
