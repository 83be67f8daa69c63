"""Seed plumbing: every RNG in the package flows through here."""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for (seed, named stream) pairs.

    Seeds may be any Python integer; they are mapped into the non-negative
    range numpy's SeedSequence accepts.
    """
    return np.random.default_rng([seed % 2 ** 64, *[s % 2 ** 64 for s in stream]])


def derive_seed(seed: int, *stream: int) -> int:
    """Stable child seed for handing to components that take a bare integer."""
    return int(make_rng(seed, *stream).integers(2 ** 63))


def text_seed(text: str) -> int:
    """Stable integer seed from text (used to seed stories from themes)."""
    return zlib.crc32(text.encode("utf-8"))
