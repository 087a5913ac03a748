"""Deterministic named sub-streams derived from one master seed.

Every random decision in the project flows through `substream`, so a run is
fully reproducible from (master seed, stream name) and independent of the
order in which components draw randomness.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(master: int, *names: str | int) -> int:
    """Stable 64-bit seed for the sub-stream identified by `names`."""
    tag = "/".join(str(n) for n in names)
    digest = hashlib.sha256(f"{master}/{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(master: int, *names: str | int) -> np.random.Generator:
    """Seeded generator for the named sub-stream of the master seed."""
    return np.random.default_rng(stream_seed(master, *names))
