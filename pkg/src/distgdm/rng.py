"""Named random sub-streams derived from one root seed.

Every consumer of randomness asks for a stream by name, e.g.
``substream(seed, "channel", 2)``.  The name is hashed into the spawn key of a
``numpy.random.SeedSequence`` so streams are independent of call order.
"""
import hashlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed, *names):
    """Return a Generator for the stream ``names`` under root ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed, *names):
    """Derive a plain integer seed for a named sub-stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
