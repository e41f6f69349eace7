"""Per-purpose random streams derived from a master seed.

Every consumer of randomness asks for a generator by purpose string plus
optional keys, e.g. ``stream(seed, "init")`` or ``stream(seed, "moso", m)``.
The derived seed is the first 8 bytes (big-endian) of
``sha256("<seed>/<purpose>/<key1>/...")``, so streams are independent of
each other and of the order in which they are requested.
"""
import hashlib

import numpy as np


def derive_seed(seed, purpose, *keys):
    text = "/".join([str(int(seed)), purpose, *map(str, keys)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stream(seed, purpose, *keys):
    return np.random.default_rng(derive_seed(seed, purpose, *keys))
