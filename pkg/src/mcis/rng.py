"""Deterministic random-stream management.

All randomness in an experiment flows from a single root seed through
counter-based (Philox) bit generators.  Substreams are derived from a
key — a tuple of purpose tags and indices such as ``("is_weights", j,
r)`` — so a given work item always sees the same stream, no matter
which worker executes it or in what order.  This is what makes results
independent of the worker count.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = ["KeyedStreams", "substream"]

_U32 = 2**32


def _key_to_ints(key) -> tuple:
    """Map a mixed tag/index key to a tuple of uint32 spawn-key words."""
    words = []
    for part in key:
        if isinstance(part, (bool, float)):
            raise TypeError(f"stream key parts must be int or str, got {part!r}")
        if isinstance(part, (int, np.integer)):
            if part < 0:
                raise ValueError(f"stream key indices must be nonnegative, got {part}")
            # split arbitrarily large indices into 32-bit words
            value = int(part)
            words.append(value % _U32)
            if value >= _U32:
                words.append(value // _U32)
        elif isinstance(part, str):
            words.append(zlib.crc32(part.encode("utf-8")))
        else:
            raise TypeError(f"stream key parts must be int or str, got {part!r}")
    return tuple(words)


@dataclass(frozen=True)
class KeyedStreams:
    """A family of independent random streams addressed by key.

    Parameters
    ----------
    seed : int
        Root entropy for the whole experiment.
    base_key : tuple of int
        Prefix prepended to every requested key; used to scope a
        sub-family (e.g. one per chain) off a parent family.
    """

    seed: int
    base_key: tuple = field(default=())

    def stream(self, *key) -> np.random.Generator:
        """Return the Generator addressed by ``key``.

        The same (seed, base_key, key) always yields a generator with
        identical output, and distinct keys yield independent streams.
        """
        seq = np.random.SeedSequence(
            self.seed, spawn_key=self.base_key + _key_to_ints(key)
        )
        return np.random.Generator(np.random.Philox(seq))

    def scoped(self, *key) -> "KeyedStreams":
        """Return a sub-family whose keys are all prefixed by ``key``."""
        return KeyedStreams(self.seed, self.base_key + _key_to_ints(key))


def substream(seed: int, *key) -> np.random.Generator:
    """One-shot helper: the stream of ``key`` under a root ``seed``."""
    return KeyedStreams(seed).stream(*key)
