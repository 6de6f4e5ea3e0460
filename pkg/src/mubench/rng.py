"""Named, splittable random streams on top of the Philox counter-based generator.

Every stochastic operation in the harness draws from a stream addressed by a
key path such as ``stream(seed, "init", "conv1")``.  Identical paths always
yield identical draws on one platform; distinct paths are statistically
independent.  Streams never share mutable state, so concurrent runs cannot
perturb each other.
"""

from __future__ import annotations

import hashlib

import numpy as np

KeyPart = "int | str"


def _digest(parts: tuple) -> bytes:
    # Philox takes a 128-bit key: exactly two little-endian u64 words.
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"stream key parts must be int or str, got {part!r}")
        token = f"{type(part).__name__}:{part}"
        h.update(token.encode("utf-8"))
        h.update(b"\x00")
    return h.digest()


class RngStream:
    """A reproducible random stream identified by its key path."""

    __slots__ = ("path",)

    def __init__(self, *path):
        self.path = tuple(path)

    def child(self, *extra) -> "RngStream":
        return RngStream(*self.path, *extra)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = np.frombuffer(_digest(self.path), dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream{self.path!r}"

    def __eq__(self, other):
        return isinstance(other, RngStream) and self.path == other.path

    def __hash__(self):
        return hash(self.path)


def stream(*path) -> RngStream:
    return RngStream(*path)
