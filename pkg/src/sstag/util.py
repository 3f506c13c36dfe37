"""Shared plumbing: error taxonomy, derived rng streams, small helpers."""

import hashlib
import zlib

import numpy as np


class SstagError(Exception):
    """Base class for all package errors."""


class ValidationError(SstagError):
    """Bad inputs, malformed files, contract violations. CLI exit code 2."""


class NumericalError(SstagError):
    """Non-finite values or numerically impossible requests. CLI exit code 3."""


class ArtifactError(SstagError):
    """Incompatible artifacts (checkpoint/vocab/graph mismatch). CLI exit code 4."""


def _key_words(parts):
    words = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            words.append(int(p) & 0xFFFFFFFF)
            words.append((int(p) >> 32) & 0xFFFFFFFF)
        elif isinstance(p, str):
            words.append(zlib.crc32(p.encode("utf-8")))
        else:
            raise TypeError(f"rng stream keys take ints/strs, got {type(p)!r}")
    return words


def rng_stream(*parts) -> np.random.Generator:
    """Deterministic generator derived from a mixed int/str key tuple.

    Streams depend only on the key, never on call order, so any work item
    can be scheduled in any order without changing its randomness.
    """
    return np.random.default_rng(np.random.SeedSequence(_key_words(parts)))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def format_float(x: float) -> str:
    """Round-trippable decimal text for float64 (bit-stable CSV cells)."""
    return format(float(x), ".17g")
