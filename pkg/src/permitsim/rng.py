"""Deterministic randomness substreams.

Every random choice in an execution is derived from a single 64-bit root
seed plus a tuple of labels identifying the choice point (a domain tag,
key labels, slot numbers, message digests, ...).  Derivation is a SHA-256
hash of the canonically encoded label tuple, so:

* re-running with the same seed reproduces every draw bit-for-bit,
* adding or removing a processor never perturbs the draws made by other
  processors (streams are keyed by content, not by call order),
* two executions that share a seed and issue a request with identical
  labels receive identical verdicts.

The last two properties are what make paired-execution experiments
meaningful: an attacker privately re-deriving another roster's behaviour
sees exactly the grant sequence that roster would have seen.
"""

from __future__ import annotations

import hashlib
import random

_U64 = 2**64


def _encode(parts: tuple) -> bytes:
    """Canonical, injective byte encoding of a label tuple."""
    out = bytearray()
    for part in parts:
        if isinstance(part, bool):  # bool is an int subclass; tag separately
            out += b"b" + (b"\x01" if part else b"\x00")
        elif isinstance(part, int):
            data = str(part).encode()
            out += b"i" + len(data).to_bytes(4, "little") + data
        elif isinstance(part, str):
            data = part.encode("utf-8")
            out += b"s" + len(data).to_bytes(4, "little") + data
        elif isinstance(part, bytes):
            out += b"y" + len(part).to_bytes(4, "little") + part
        elif part is None:
            out += b"n"
        else:
            raise TypeError(f"unsupported label type {type(part)!r}")
    return bytes(out)


def substream_u64(seed: int, *parts) -> int:
    """A 64-bit value tied to (seed, *parts)."""
    h = hashlib.sha256()
    h.update(str(seed).encode())
    h.update(_encode(parts))
    return int.from_bytes(h.digest()[:8], "little")


def uniform(seed: int, *parts) -> float:
    """A uniform float in [0, 1) tied to (seed, *parts)."""
    return substream_u64(seed, *parts) / _U64


def uniform_int(seed: int, lo: int, hi: int, *parts) -> int:
    """A uniform integer in [lo, hi] tied to (seed, *parts)."""
    if hi < lo:
        raise ValueError(f"empty range [{lo}, {hi}]")
    return lo + substream_u64(seed, *parts) % (hi - lo + 1)


def stream(seed: int, *parts) -> random.Random:
    """A seeded random.Random for choice points needing many draws."""
    return random.Random(substream_u64(seed, *parts))
