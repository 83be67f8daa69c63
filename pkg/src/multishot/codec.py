"""Invertible latent codec: an orthogonal patch transform standing in for a VAE.

Frames are cut into non-overlapping p x p patches, each flattened and rotated
by a fixed seeded orthogonal matrix, then affinely normalized to roughly unit
scale. Because the transform is orthogonal the codec inverts exactly, which
makes every latent-space operation downstream checkable in pixel space.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .seeding import make_rng
from .world import Frame

Latent = np.ndarray  # float32, (h, w, c) with c = 3 * patch^2


@dataclass(frozen=True)
class CodecConfig:
    seed: int = 7
    patch: int = 8
    frame_size: int = 64

    def __post_init__(self):
        if self.frame_size % self.patch != 0:
            raise ValueError("frame_size must be divisible by patch")
        grid = self.frame_size // self.patch
        if grid & (grid - 1) != 0:
            raise ValueError("latent spatial dims must be powers of two")


class LatentCodec:
    """Orthogonal linear codec; immutable after construction."""

    def __init__(self, config: CodecConfig = CodecConfig()):
        self.config = config
        p = config.patch
        c = 3 * p * p
        gauss = make_rng(config.seed, 11).standard_normal((c, c))
        q, r = np.linalg.qr(gauss)
        # Fix the QR sign ambiguity so Q is a pure function of the seed.
        q = q * np.sign(np.diag(r))
        self._q = q  # float64, rows orthonormal
        self._scale = float(np.sqrt(12.0))  # U[0,1] pixels -> unit-variance channels
        self._offset = -self._scale * (self._q @ np.full(c, 0.5))
        self.channels = c
        self.grid = config.frame_size // p

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.grid, self.grid, self.channels)

    @property
    def offset(self) -> np.ndarray:
        """Per-channel latent value of an all-zeros frame."""
        return self._offset.astype(np.float32)

    @property
    def orthogonal_matrix(self) -> np.ndarray:
        return self._q.copy()

    def config_hash(self) -> str:
        payload = json.dumps({"seed": self.config.seed, "patch": self.config.patch,
                              "frame_size": self.config.frame_size, "v": 1},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def _patches(self, frame: np.ndarray) -> np.ndarray:
        p = self.config.patch
        g = self.grid
        return (frame.reshape(g, p, g, p, 3)
                .transpose(0, 2, 1, 3, 4)
                .reshape(g, g, self.channels))

    def _unpatch(self, vecs: np.ndarray) -> np.ndarray:
        p = self.config.patch
        g = self.grid
        return (vecs.reshape(g, g, p, p, 3)
                .transpose(0, 2, 1, 3, 4)
                .reshape(g * p, g * p, 3))

    def encode(self, frame: Frame) -> Latent:
        frame = np.asarray(frame)
        n = self.config.frame_size
        if frame.shape != (n, n, 3):
            raise ValueError(f"expected frame of shape {(n, n, 3)}, got {frame.shape}")
        v = self._patches(frame.astype(np.float64))
        z = self._scale * (v @ self._q.T) + self._offset
        return z.astype(np.float32)

    def decode(self, latent: Latent, clip: bool = False) -> Frame:
        latent = np.asarray(latent)
        if latent.shape != self.latent_shape:
            raise ValueError(
                f"expected latent of shape {self.latent_shape}, got {latent.shape}")
        y = (latent.astype(np.float64) - self._offset) / self._scale
        frame = self._unpatch(y @ self._q)
        if clip:
            frame = np.clip(frame, 0.0, 1.0)
        return frame.astype(np.float32)
