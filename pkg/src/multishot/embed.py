"""Deterministic frame and text embeddings for ranking and evaluation.

Hand-crafted features (color grids, histograms, luminance moments; hashed
bags-of-words) projected to a shared unit-norm space. No trained weights, so
every similarity used by the metrics is reproducible bit-for-bit. Components
accept any object with the same embed_frame/embed_text/cosine surface, so an
external embedding service can be swapped in.
"""

from __future__ import annotations

import json
import re
import urllib.error
import urllib.request
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import EmbedderUnavailableError
from .seeding import make_rng
from .world import Frame

Embedding = np.ndarray  # float32, (dim,), unit L2 norm

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Chosen so every entity word (color/shape) lands in its own fold bucket,
# colliding with no other word of the shot-description grammar.
DEFAULT_TEXT_SALT = 1230


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 64
    buckets: int = 256
    projection_seed: int = 23
    text_salt: int = DEFAULT_TEXT_SALT

    def __post_init__(self):
        if self.buckets % self.dim != 0:
            raise ValueError("buckets must be a multiple of dim")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, salt: int, buckets: int) -> int:
    return zlib.crc32(f"{salt}:{token}".encode()) % buckets


class Embedder:
    """Stateless deterministic embedder; safe to share across threads."""

    def __init__(self, config: EmbedderConfig = EmbedderConfig()):
        self.config = config
        self.dim = config.dim
        # 4x4 mean-color grid (48) + 8-bin per-channel histogram (24)
        # + luminance mass and centroid (3).
        self._n_features = 75
        proj = make_rng(config.projection_seed, 5).standard_normal(
            (config.dim, self._n_features))
        self._proj = proj / np.sqrt(self._n_features)

    def _frame_features(self, frame: np.ndarray) -> np.ndarray:
        h, w, _ = frame.shape
        if h % 4 or w % 4:
            raise ValueError("frame dims must be divisible by 4")
        grid = frame.reshape(4, h // 4, 4, w // 4, 3).mean(axis=(1, 3)).ravel()
        hist = np.concatenate([
            np.histogram(frame[..., c], bins=8, range=(0.0, 1.0))[0] for c in range(3)
        ]).astype(np.float64) / (h * w)
        lum = 0.299 * frame[..., 0] + 0.587 * frame[..., 1] + 0.114 * frame[..., 2]
        mass = float(lum.sum())
        if mass > 1e-9:
            ys, xs = np.mgrid[0:h, 0:w]
            cx = float((lum * xs).sum() / mass) / max(w - 1, 1)
            cy = float((lum * ys).sum() / mass) / max(h - 1, 1)
        else:
            cx = cy = 0.5
        moments = np.array([mass / (h * w), cx, cy])
        return np.concatenate([grid, hist, moments])

    def embed_frame(self, frame: Frame) -> Embedding:
        vec = self._proj @ self._frame_features(np.asarray(frame, dtype=np.float64))
        return _normalize(vec, self.dim)

    def embed_text(self, text: str) -> Embedding:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError("cannot embed empty text")
        counts = np.zeros(self.config.buckets)
        for tok in tokens:
            counts[token_bucket(tok, self.config.text_salt, self.config.buckets)] += 1.0
        folded = counts.reshape(self.config.buckets // self.dim, self.dim).sum(axis=0)
        return _normalize(folded, self.dim)

    def cosine(self, a: Embedding, b: Embedding) -> float:
        return cosine(a, b)


def _normalize(vec: np.ndarray, dim: int) -> Embedding:
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:
        out = np.zeros(dim, dtype=np.float32)
        out[0] = 1.0
        return out
    return (vec / norm).astype(np.float32)


def cosine(a: Embedding, b: Embedding) -> float:
    """Dot product of unit vectors, clamped against float drift."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"embedding dims differ: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a.astype(np.float64), b.astype(np.float64)), -1.0, 1.0))


class HttpEmbedder:
    """Client for an external embedding service with the same contract.

    POSTs PNG bytes (image/png) or UTF-8 text (text/plain) and expects
    ``{"vector": [...dim floats...]}`` back. Any timeout, connection failure,
    or non-2xx status raises EmbedderUnavailableError.
    """

    def __init__(self, url: str, dim: int = 64, timeout: float = 10.0):
        self.url = url
        self.dim = dim
        self.timeout = timeout

    def _post(self, payload: bytes, content_type: str) -> Embedding:
        req = urllib.request.Request(self.url, data=payload, method="POST",
                                     headers={"Content-Type": content_type})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                if not 200 <= resp.status < 300:
                    raise EmbedderUnavailableError(f"status {resp.status}")
                body = json.loads(resp.read().decode("utf-8"))
        except EmbedderUnavailableError:
            raise
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise EmbedderUnavailableError(str(exc)) from exc
        vec = np.asarray(body.get("vector", []), dtype=np.float64)
        if vec.shape != (self.dim,):
            raise EmbedderUnavailableError(
                f"service returned {vec.shape}, expected ({self.dim},)")
        return _normalize(vec, self.dim)

    def embed_frame(self, frame: Frame) -> Embedding:
        from .world import frame_to_png_bytes
        return self._post(frame_to_png_bytes(frame), "image/png")

    def embed_text(self, text: str) -> Embedding:
        if not tokenize(text):
            raise ValueError("cannot embed empty text")
        return self._post(text.encode("utf-8"), "text/plain")

    def cosine(self, a: Embedding, b: Embedding) -> float:
        return cosine(a, b)
