"""Deterministic random-stream derivation from a single root seed.

Every stochastic component receives its own generator derived from the root
seed and a label path, so adding consumers never perturbs existing streams.
"""
from __future__ import annotations

import zlib

import numpy as np


def derive_entropy(root_seed: int, labels: tuple) -> list[int]:
    """Map (root_seed, labels) to a stable entropy list for SeedSequence.

    String labels are hashed with crc32; integer labels are used directly.
    The mapping is pure, so the same path always yields the same stream.
    """
    entropy = [int(root_seed) & 0xFFFFFFFF]
    for lab in labels:
        if isinstance(lab, str):
            entropy.append(zlib.crc32(lab.encode("utf-8")))
        elif isinstance(lab, (int, np.integer)):
            entropy.append(int(lab) & 0xFFFFFFFF)
        else:
            raise TypeError(f"rng labels must be str or int, got {type(lab)!r}")
    return entropy


def stream(root_seed: int, *labels: int | str) -> np.random.Generator:
    """Return an independent Generator for the given label path."""
    seq = np.random.SeedSequence(derive_entropy(root_seed, labels))
    return np.random.Generator(np.random.PCG64(seq))
