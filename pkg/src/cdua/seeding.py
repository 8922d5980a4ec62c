"""Stable seed derivation from one master seed."""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *labels) -> int:
    """63-bit seed from sha256 of the master seed and purpose labels; stable across
    processes and platforms (unlike ``hash``)."""
    text = "/".join([str(int(master))] + [str(label) for label in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1
