"""Named deterministic random substreams.

Every piece of randomness in the package flows from a single integer seed
through `substream(seed, *names)`. Names are hashed with SHA-256 so the
derived streams are stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_to_int(name: object) -> int:
    digest = hashlib.sha256(repr(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *names: object) -> np.random.Generator:
    """Derive an independent generator for (seed, names...)."""
    entropy = [int(seed)] + [_name_to_int(n) for n in names]
    return np.random.default_rng(entropy)


def substream_seed(seed: int, *names: object) -> int:
    """Integer seed for the named substream (for APIs that want an int)."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for n in names:
        h.update(b"/")
        h.update(repr(n).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")
