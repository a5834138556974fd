"""Named random sub-streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def seed_sequence(root: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key(n) for n in names))


def substream(root: int, *names) -> np.random.Generator:
    """Independent generator for ``(root, *names)``; e.g. ``substream(7, "train", "decoder", step)``."""
    return np.random.default_rng(seed_sequence(root, *names))


def derive_seed(root: int, *names) -> int:
    return int(seed_sequence(root, *names).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
