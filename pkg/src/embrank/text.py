"""Deterministic text plumbing: word splitting and stable hashing token ids.

Python's builtin ``hash`` is salted per process, so token ids are derived
from a 64-bit FNV-1a hash instead; identical text maps to identical ids on
every platform and in every run.
"""

from __future__ import annotations

import re

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def split_terms(text: str) -> list[str]:
    """Lowercase the text and return the runs of alphanumeric characters."""
    return _WORD_RE.findall(text.lower())


def stable_hash(term: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``term``."""
    h = _FNV_OFFSET
    for byte in term.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str, id_space: int) -> list[int]:
    """Split ``text`` into terms and hash each into ``[0, id_space)``.

    Empty text tokenizes to an empty list.
    """
    if id_space <= 0:
        raise ValueError(f"id_space must be positive, got {id_space}")
    return [stable_hash(term) % id_space for term in split_terms(text)]
