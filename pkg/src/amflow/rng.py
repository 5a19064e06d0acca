"""Named random streams derived from one 64-bit seed.

Each component asks for its own stream by name ("texture", "noise",
"projection", ...), so reseeding one of them never shifts the draws of another.
"""
import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed, *names):
    """A ``numpy.random.Generator`` for ``(seed, *names)``.

    The same arguments always give the same draws, across processes and
    platforms (PCG64 via ``SeedSequence``).
    """
    key = tuple(_name_key(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & _MASK64, spawn_key=key)))
