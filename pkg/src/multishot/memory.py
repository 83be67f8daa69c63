"""Constant-cost shot memory: rank history latents, tile them into one token.

All frames of all preceding anchor pairs go into an unordered bank. They are
ranked by embedding similarity to a query, then packed into a single
latent-shaped grid by recursive halving: rank 1 gets half the area, rank 2 a
quarter, and so on, so total area converges below one grid regardless of
history length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import Latent, LatentCodec
from .embed import Embedding, cosine
from .errors import CapacityExceededError
from .world import FramePair

_ROLE_ORDER = {"start": 0, "end": 1}


@dataclass(frozen=True)
class MemoryItem:
    latent: Latent
    embedding: Embedding
    shot_index: int
    frame_role: str  # "start" or "end"


@dataclass
class MemoryBank:
    items: list[MemoryItem]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class PackedMemoryToken:
    grid: np.ndarray  # (h, w, c), float32; unoccupied region exactly zero
    layout: list[tuple[int, tuple[int, int, int, int], float]]  # (rank, rect, area)
    occupancy: float


def capacity(h: int, w: int) -> int:
    """Maximum number of tiles: halving stops at single cells."""
    return int(np.log2(h)) + int(np.log2(w))


def collect_bank(history: list[FramePair], codec: LatentCodec, embedder) -> MemoryBank:
    """Encode and embed every frame of every preceding pair.

    Iteration order of the returned items is an implementation detail; callers
    must rank before use.
    """
    items = []
    for j, pair in enumerate(history):
        for role, frame in (("start", pair.start), ("end", pair.end)):
            items.append(MemoryItem(
                latent=codec.encode(frame),
                embedding=embedder.embed_frame(frame),
                shot_index=j,
                frame_role=role,
            ))
    return MemoryBank(items=items)


def rank_bank(bank: MemoryBank, query: Embedding) -> list[Latent]:
    """Latents sorted by similarity to the query, most similar first.

    Ties break on (shot_index ascending, start before end) so the order is a
    pure function of the bank contents, not of insertion order.
    """
    scored = [
        (-cosine(item.embedding, query), item.shot_index, _ROLE_ORDER[item.frame_role], i)
        for i, item in enumerate(bank.items)
    ]
    scored.sort(key=lambda s: s[:3])
    return [bank.items[s[3]].latent for s in scored]


def downsample(latent: Latent, target_h: int, target_w: int) -> np.ndarray:
    """Non-overlapping block-average pooling per channel."""
    h, w, c = latent.shape
    if target_h < 1 or target_w < 1 or h % target_h or w % target_w:
        raise ValueError(f"target dims ({target_h}, {target_w}) must divide ({h}, {w})")
    blocked = latent.reshape(target_h, h // target_h, target_w, w // target_w, c)
    return blocked.mean(axis=(1, 3))


def _halve(rect: tuple[int, int, int, int]) -> tuple[tuple, tuple]:
    r0, c0, r1, c1 = rect
    height, width = r1 - r0, c1 - c0
    if width >= height:  # ties split width
        mid = c0 + width // 2
        return (r0, c0, r1, mid), (r0, mid, r1, c1)
    mid = r0 + height // 2
    return (r0, c0, mid, c1), (mid, c0, r1, c1)


def pack(ranked: list[Latent], dims: tuple[int, int, int]) -> PackedMemoryToken:
    """Tile ranked latents into one grid by recursive halving.

    Rank j occupies area fraction 2**-j; the tile is the first half of the
    remaining region, split along its longer axis. Each latent is average-
    pooled to its tile size. The unassigned remainder stays zero.
    """
    h, w, c = dims
    cap = capacity(h, w)
    if len(ranked) > cap:
        raise CapacityExceededError(
            f"{len(ranked)} items exceed tiling capacity {cap} for {h}x{w}")
    grid = np.zeros((h, w, c), dtype=np.float32)
    layout = []
    remaining = (0, 0, h, w)
    for j, latent in enumerate(ranked, start=1):
        tile, remaining = _halve(remaining)
        r0, c0, r1, c1 = tile
        grid[r0:r1, c0:c1] = downsample(np.asarray(latent), r1 - r0, c1 - c0)
        layout.append((j, tile, 2.0 ** -j))
    return PackedMemoryToken(
        grid=grid,
        layout=layout,
        occupancy=1.0 - 2.0 ** -len(ranked) if ranked else 0.0,
    )


def zero_token(dims: tuple[int, int, int]) -> PackedMemoryToken:
    """The empty-history token (also used by the memory ablation)."""
    return pack([], dims)


def build_memory(history: list[FramePair], query: Embedding,
                 codec: LatentCodec, embedder) -> PackedMemoryToken:
    """Full path: collect, rank against the query, truncate to capacity, pack."""
    dims = codec.latent_shape
    if not history:
        return zero_token(dims)
    ranked = rank_bank(collect_bank(history, codec, embedder), query)
    return pack(ranked[:capacity(dims[0], dims[1])], dims)
