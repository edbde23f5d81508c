"""Deterministic derivation of named random sub-streams from one seed.

Every stochastic component (training, smoothing noise, attacks) gets its own
stream derived by hashing the master seed together with a label path, so one
integer reproduces a whole experiment and no two components ever share a
stream by accident.
"""

import hashlib
import struct

from .errors import ConfigError


def _digest(master: int, labels) -> bytes:
    if not isinstance(master, int) or not 0 <= master < 2**64:
        raise ConfigError("seed must be an integer in [0, 2**64)")
    h = hashlib.sha256()
    h.update(struct.pack("<Q", master))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return h.digest()


def derive_seed(master: int, *labels) -> int:
    """A 63-bit seed for the (master, labels) path; stable across runs."""
    return int.from_bytes(_digest(master, labels)[:8], "little") >> 1


def philox_key(master: int, *labels) -> int:
    """A 128-bit nonzero key for counter-based generators."""
    key = int.from_bytes(_digest(master, labels)[:16], "little")
    return key or 1
