"""Start-end frame pair predictor: unified context encoding, joint shot tensor,
velocity prediction with full bidirectional attention, and ODE sampling.

The network reads one flat token sequence [memory | context | noisy shot] and
outputs a velocity only at the shot positions. The two shot halves (start and
end frame latents) are concatenated along the sequence axis, so they share
attention context at every layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .codec import CodecConfig, LatentCodec
from .embed import DEFAULT_TEXT_SALT, token_bucket, tokenize
from .errors import NumericError
from .memory import PackedMemoryToken
from .seeding import make_rng
from .world import (CAMERA_ANGLES, CAMERA_MOVEMENTS, SHOT_SCALES, Frame,
                    FramePair, ShotAttributes)

JointShotTensor = np.ndarray  # float32, (2, g, g, c): index 0 = start, 1 = end
ContextTokens = torch.Tensor  # (L_ctx, d_model)

_MIN_LEN_BUCKET = 3
_NUM_LEN_BUCKETS = 8


@dataclass(frozen=True)
class ModelConfig:
    frame_size: int = 64
    patch: int = 8
    d_model: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    text_len: int = 12
    text_buckets: int = 256
    text_salt: int = DEFAULT_TEXT_SALT
    prev_frame_grid: int = 4  # previous end frame pooled to grid^2 patch tokens
    memory_patch: int = 2  # memory grid patch size -> (g/mp)^2 tokens
    init_seed: int = 0

    @property
    def grid(self) -> int:
        return self.frame_size // self.patch

    @property
    def channels(self) -> int:
        return 3 * self.patch * self.patch

    def __post_init__(self):
        if self.grid % self.prev_frame_grid:
            raise ValueError("prev_frame_grid must divide the latent grid")
        if self.grid % self.memory_patch:
            raise ValueError("memory_patch must divide the latent grid")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


def joint_encode(pair: FramePair, codec: LatentCodec) -> JointShotTensor:
    """Encode both frames of a pair into one sequence-stacked tensor."""
    return np.stack([codec.encode(pair.start), codec.encode(pair.end)])


def joint_split(x: JointShotTensor, codec: LatentCodec, clip: bool = False) -> FramePair:
    """Inverse of joint_encode; clips to [0, 1] only when emitting images."""
    x = np.asarray(x)
    expected = (2,) + codec.latent_shape
    if x.shape != expected:
        raise ValueError(f"expected joint tensor of shape {expected}, got {x.shape}")
    return FramePair(start=codec.decode(x[0], clip=clip),
                     end=codec.decode(x[1], clip=clip))


@dataclass(frozen=True)
class SolverConfig:
    num_steps: int = 20
    scheme: str = "euler"  # or "midpoint"
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.scheme not in ("euler", "midpoint"):
            raise ValueError(f"unknown solver scheme {self.scheme!r}")


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None, :] * 1000.0
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _Block(nn.Module):
    """Transformer block: bidirectional self-attention with adaptive layer
    norm, modulated by the time embedding (zero-initialized, so an untrained
    block is the identity)."""

    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(d, mlp_ratio * d),
            nn.GELU(),
            nn.Linear(mlp_ratio * d, d),
        )
        self.modulation = nn.Linear(d, 6 * d)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = \
            self.modulation(cond)[:, None, :].chunk(6, dim=-1)
        h = self.norm1(x) * (1.0 + scale1) + shift1
        attn, _ = self.attn(h, h, h, need_weights=False)
        x = x + gate1 * attn
        h = self.norm2(x) * (1.0 + scale2) + shift2
        return x + gate2 * self.mlp(h)


class PairPredictor(nn.Module):
    """The trainable velocity field over joint shot tensors.

    Sequence layout per sample: memory patch tokens, then context tokens
    (text, attributes, previous-end-frame patches), then the 2*g*g noisy shot
    tokens carrying role, position, and additive time embeddings.
    """

    def __init__(self, config: ModelConfig = ModelConfig(),
                 codec: LatentCodec | None = None):
        super().__init__()
        torch.manual_seed(config.init_seed)
        self.config = config
        self.codec = codec or LatentCodec(
            CodecConfig(patch=config.patch, frame_size=config.frame_size))
        if self.codec.latent_shape != (config.grid, config.grid, config.channels):
            raise ValueError("codec latent shape inconsistent with model config")
        d, c, g = config.d_model, config.channels, config.grid

        # context encoder
        self.tok_embed = nn.Embedding(config.text_buckets + 1, d)  # last id = pad
        n_attr_values = len(SHOT_SCALES) + len(CAMERA_ANGLES) + len(CAMERA_MOVEMENTS) \
            + _NUM_LEN_BUCKETS
        self.attr_embed = nn.Embedding(n_attr_values, d)
        self.prev_proj = nn.Linear(c, d)
        self.null_prev = nn.Parameter(torch.zeros(d))
        pg = config.prev_frame_grid
        self.text_pos = nn.Parameter(torch.zeros(config.text_len, d))
        self.attr_pos = nn.Parameter(torch.zeros(4, d))
        self.prev_pos = nn.Parameter(torch.zeros(pg * pg, d))

        # generator
        mp = config.memory_patch
        self.mem_proj = nn.Linear(mp * mp * c, d)
        self.mem_pos = nn.Parameter(torch.zeros((g // mp) ** 2, d))
        self.mem_role = nn.Parameter(torch.zeros(d))
        self.shot_proj = nn.Linear(c, d)
        self.shot_pos = nn.Parameter(torch.zeros(g * g, d))
        self.role_embed = nn.Embedding(2, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            [_Block(d, config.heads, config.mlp_ratio) for _ in range(config.blocks)])
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, c)

        self._init_weights()

    def _init_weights(self):
        for p in (self.text_pos, self.attr_pos, self.prev_pos, self.mem_pos,
                  self.shot_pos, self.mem_role, self.null_prev):
            nn.init.normal_(p, std=0.02)
        nn.init.normal_(self.tok_embed.weight, std=0.02)
        nn.init.normal_(self.attr_embed.weight, std=0.02)
        nn.init.normal_(self.role_embed.weight, std=0.02)
        # zero-init head so the initial velocity field is exactly zero
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # ---------------- context encoding ----------------

    def _text_ids(self, description: str) -> list[int]:
        cfg = self.config
        ids = [token_bucket(tok, cfg.text_salt, cfg.text_buckets)
               for tok in tokenize(description)][:cfg.text_len]
        ids += [cfg.text_buckets] * (cfg.text_len - len(ids))
        return ids

    @staticmethod
    def _attr_ids(attributes: ShotAttributes) -> list[int]:
        scale = SHOT_SCALES.index(attributes.shot_scale)
        angle = CAMERA_ANGLES.index(attributes.camera_angle)
        move = CAMERA_MOVEMENTS.index(attributes.camera_movement)
        length = min(max(attributes.shot_length, _MIN_LEN_BUCKET),
                     _MIN_LEN_BUCKET + _NUM_LEN_BUCKETS - 1) - _MIN_LEN_BUCKET
        off = 0
        ids = []
        for idx, n in ((scale, len(SHOT_SCALES)), (angle, len(CAMERA_ANGLES)),
                       (move, len(CAMERA_MOVEMENTS)), (length, _NUM_LEN_BUCKETS)):
            ids.append(off + idx)
            off += n
        return ids

    def encode_context(self, prev_end_frame: Frame | None, description: str,
                       attributes: ShotAttributes) -> ContextTokens:
        """Unified context tokens for one shot.

        The first shot has no previous frame; its patch slots all carry the
        learned null token, so the output is independent of any frame data.
        """
        if not description.strip():
            raise ValueError("description must be non-empty")
        cfg = self.config
        text = self.tok_embed(torch.tensor(self._text_ids(description))) + self.text_pos
        attrs = self.attr_embed(torch.tensor(self._attr_ids(attributes))) + self.attr_pos

        pg = cfg.prev_frame_grid
        if prev_end_frame is None:
            prev = self.null_prev.unsqueeze(0).expand(pg * pg, -1) + self.prev_pos
        else:
            lat = self.codec.encode(prev_end_frame)
            g = cfg.grid
            pooled = lat.reshape(pg, g // pg, pg, g // pg, -1).mean(axis=(1, 3))
            pooled = torch.from_numpy(np.ascontiguousarray(pooled)).to(self.dtype)
            prev = self.prev_proj(pooled.reshape(pg * pg, -1)) + self.prev_pos
        return torch.cat([text, attrs, prev], dim=0)

    # ---------------- generator forward ----------------

    def forward(self, mem: torch.Tensor, ctx: torch.Tensor, t: torch.Tensor,
                x_t: torch.Tensor) -> torch.Tensor:
        """Batched velocity prediction.

        mem: (B, g, g, c) packed memory grids
        ctx: (B, L_ctx, d) context tokens
        t:   (B,) times in [0, 1]
        x_t: (B, 2, g, g, c) noisy joint shot tensors
        returns (B, 2, g, g, c) velocities
        """
        cfg = self.config
        b = x_t.shape[0]
        g, c, mp = cfg.grid, cfg.channels, cfg.memory_patch

        patches = (mem.reshape(b, g // mp, mp, g // mp, mp, c)
                   .permute(0, 1, 3, 2, 4, 5)
                   .reshape(b, (g // mp) ** 2, mp * mp * c))
        mem_tok = self.mem_proj(patches) + self.mem_pos + self.mem_role

        shot = self.shot_proj(x_t.reshape(b, 2, g * g, c))
        shot = shot + self.shot_pos[None, None]
        shot = shot + self.role_embed(torch.tensor([0, 1]))[None, :, None, :]
        t_emb = self.time_mlp(_timestep_embedding(t.to(self.dtype), cfg.d_model))
        shot = shot + t_emb[:, None, None, :]
        shot = shot.reshape(b, 2 * g * g, cfg.d_model)

        seq = torch.cat([mem_tok, ctx, shot], dim=1)
        for block in self.blocks:
            seq = block(seq, t_emb)
        out = self.head(self.out_norm(seq[:, -2 * g * g:]))
        return out.reshape(b, 2, g, g, c)

    # ---------------- contract-level single-sample ops ----------------

    def predict_velocity(self, ctx: ContextTokens, t: float, x_t: JointShotTensor,
                         mem: PackedMemoryToken) -> JointShotTensor:
        """One forward pass over [memory; context; shot] for a single sample."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t={t} outside [0, 1]")
        x_t = np.asarray(x_t)
        if not np.all(np.isfinite(x_t)) or not np.all(np.isfinite(mem.grid)):
            raise NumericError("non-finite values in velocity inputs")
        with torch.no_grad():
            v = self.forward(
                torch.from_numpy(np.ascontiguousarray(mem.grid)).to(self.dtype)[None],
                ctx[None].to(self.dtype),
                torch.tensor([t], dtype=self.dtype),
                torch.from_numpy(np.ascontiguousarray(x_t)).to(self.dtype)[None],
            )
        return v[0].numpy().astype(np.float32)

    def sample_pair(self, ctx: ContextTokens, mem: PackedMemoryToken,
                    solver: SolverConfig) -> FramePair:
        """Integrate the velocity field from seeded noise at t=0 to a pair at t=1."""
        g, c = self.config.grid, self.config.channels
        x = make_rng(solver.seed).standard_normal((2, g, g, c)).astype(np.float32)
        dt = 1.0 / solver.num_steps
        for k in range(solver.num_steps):
            t_k = k / solver.num_steps
            v = self.predict_velocity(ctx, t_k, x, mem)
            if solver.scheme == "euler":
                x = x + dt * v
            else:  # midpoint
                x_mid = x + 0.5 * dt * v
                v_mid = self.predict_velocity(ctx, t_k + 0.5 * dt, x_mid, mem)
                x = x + dt * v_mid
        return joint_split(x, self.codec, clip=True)


# ---------------- checkpoints ----------------


def save_checkpoint(model: PairPredictor, path: str | Path, stage: str, step: int,
                    extra: dict | None = None) -> Path:
    """Write weights plus a plain-text manifest next to them."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_config": asdict(model.config),
        "codec_config": asdict(model.codec.config),
        "state_dict": model.state_dict(),
        "stage": stage,
        "step": step,
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    manifest = {
        "stage": stage,
        "step": step,
        "codec_hash": model.codec.config_hash(),
        "d_model": model.config.d_model,
        "blocks": model.config.blocks,
        "heads": model.config.heads,
        "param_count": model.param_count(),
        "init_seed": model.config.init_seed,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path,
                    codec: LatentCodec | None = None) -> tuple[PairPredictor, dict]:
    """Rebuild a model from a checkpoint, verifying codec compatibility."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    stored_codec = LatentCodec(CodecConfig(**payload["codec_config"]))
    if codec is not None and codec.config_hash() != stored_codec.config_hash():
        raise ValueError(
            f"codec hash mismatch: checkpoint {stored_codec.config_hash()} "
            f"vs provided {codec.config_hash()}")
    model = PairPredictor(ModelConfig(**payload["model_config"]),
                          codec or stored_codec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
