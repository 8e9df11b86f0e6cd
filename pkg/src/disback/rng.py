"""Named random streams derived from one master seed.

Each stage draws from its own stream, keyed by ``zlib.crc32(name)`` as the
SeedSequence spawn key, so adding or reordering stages never shifts another
stage's draws. Streams are PCG64 generators.
"""

from __future__ import annotations

import zlib

import numpy as np

TEACHER = "teacher-training"
MIXTURE = "mixture"
GENERATOR_INIT = "generator-init"
DEGRADATION = "degradation"
DISTILL_ETA = "distill-eta"
DISTILL_PHI = "distill-phi"
EVAL = "eval"


def stream_seed(master_seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)


def stream(master_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for stage ``name``; ``extra`` integers sub-key it (e.g. an eval step)."""
    return np.random.Generator(np.random.PCG64(stream_seed(master_seed, name, *extra)))
