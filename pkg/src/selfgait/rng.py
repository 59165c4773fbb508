"""Named random streams derived from one run seed.

Every consumer (data synthesis, parameter init, batch sampling, ...) gets its
own stream, so changing how much randomness one of them draws never shifts
the others.  This matters for paired-seed comparisons.
"""
from __future__ import annotations

import contextlib
import zlib

import numpy as np
import torch


def _entropy(seed: int, name: str) -> list[int]:
    return [int(seed), zlib.crc32(name.encode())]


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(_entropy(seed, name))


def torch_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence(_entropy(seed, name)).generate_state(1, dtype=np.uint64)[0] >> 1)


@contextlib.contextmanager
def torch_stream(seed: int, name: str):
    """Seed torch's global generator for the block, restoring it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed(seed, name))
        yield
