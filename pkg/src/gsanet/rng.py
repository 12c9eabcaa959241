"""Named random streams derived from one run seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, label: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, label, *keys)``; stable across runs."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode()), *(int(k) for k in keys)])
