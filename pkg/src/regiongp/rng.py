"""Named random substreams derived from one user-facing seed.

Every stochastic stage draws from its own named stream so changing how
one stage consumes randomness never perturbs another, and concurrent
work needs no shared generator.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for (seed, names...), stable across runs."""
    tag = "/".join(str(n) for n in names)
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    word = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), word)))
