"""Stable 64-bit FNV-1a hashing shared by seeding and feature bucketing."""

from __future__ import annotations

import hashlib

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF

# ASCII unit separator between hashed parts.
SEPARATOR = "\x1f"


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def stable_hash(*parts: object) -> int:
    """Hash ``parts`` joined by the unit separator, as UTF-8, with FNV-1a 64.

    ``stable_hash(7, "task-a", 2)`` hashes the bytes of ``"7\\x1ftask-a\\x1f2"``.
    The value is identical across processes, platforms and languages.
    """
    return fnv1a_64(SEPARATOR.join(str(p) for p in parts).encode("utf-8"))


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
