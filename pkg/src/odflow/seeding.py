"""Named random substreams derived from a single experiment seed.

Every stochastic component (demand draws, vehicle departure times, parameter
init, shuffling) pulls its generator from ``substream(seed, *path)`` with a
distinct path, so results do not depend on the order in which components run.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np

_MASK64 = (1 << 64) - 1


@lru_cache(maxsize=256)
def _hash_label(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _path_component(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    return _hash_label(str(part))


def substream(seed: int, *path) -> np.random.Generator:
    """Return the generator for the substream named by ``path``.

    The same ``(seed, path)`` always yields the same stream, on any platform,
    regardless of how many other substreams were created before it. Path
    components may be ints or strings.
    """
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = (int(seed),) + tuple(_path_component(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy))
