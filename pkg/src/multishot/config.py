"""Run configuration: a nested, schema-validated document with strict keys.

Unknown keys are rejected so typos fail fast; a resolved copy (all defaults
filled) is persisted with every command's output for reproducibility.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .codec import CodecConfig, LatentCodec
from .embed import DEFAULT_TEXT_SALT, Embedder, EmbedderConfig
from .errors import ConfigError
from .model import ModelConfig, SolverConfig
from .seeding import derive_seed
from .training import TrainConfig
from .world import WorldConfig


@dataclass(frozen=True)
class DatasetSection:
    train_stories: int = 512
    test_stories: int = 64
    min_shots: int = 2
    max_shots: int = 8


@dataclass(frozen=True)
class CodecSection:
    seed: int = 7
    patch: int = 8


@dataclass(frozen=True)
class EmbedderSection:
    dim: int = 64
    buckets: int = 256
    projection_seed: int = 23
    text_salt: int = DEFAULT_TEXT_SALT


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    text_len: int = 12
    text_buckets: int = 256
    prev_frame_grid: int = 4
    memory_patch: int = 2


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-4
    batch_size: int = 8
    sft_steps: int = 2000
    dpo_steps: int = 400
    beta: float = 50.0
    coupled_noise: bool = True
    checkpoint_every: int = 500
    log_every: int = 50
    stories: int = 8
    story_shots: int = 4
    heldout_stories: int = 16


@dataclass(frozen=True)
class SolverSection:
    num_steps: int = 20
    scheme: str = "euler"


@dataclass(frozen=True)
class PipelineSection:
    num_shots: int = 4
    clip_length: int | None = None  # None: use each shot's shot_length
    checkpoint: str | None = None
    # Endpoints: a string is an HTTP URL, a list is a subprocess argv.
    director_endpoint: object = None
    refiner_endpoint: object = None
    video_endpoint: object = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_root: str = "runs"
    deterministic: bool = False
    world: WorldConfig = field(default_factory=WorldConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    codec: CodecSection = field(default_factory=CodecSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    solver: SolverSection = field(default_factory=SolverSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)


def _load_section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        factory = f.default_factory
        if factory is not dataclasses.MISSING and isinstance(factory, type) \
                and dataclasses.is_dataclass(factory):
            kwargs[name] = _load_section(factory, value,
                                         f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def load_config(data: dict) -> RunConfig:
    """Validate a raw config dict; unknown keys are an error."""
    return _load_section(RunConfig, data, "")


def load_config_file(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return load_config(data)


def resolved_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def persist_resolved(config: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(resolved_dict(config), indent=2, sort_keys=True))
    return path


# ---------------- component builders ----------------


def make_codec(config: RunConfig) -> LatentCodec:
    return LatentCodec(CodecConfig(seed=config.codec.seed, patch=config.codec.patch,
                                   frame_size=config.world.frame_size))


def make_embedder(config: RunConfig) -> Embedder:
    e = config.embedder
    return Embedder(EmbedderConfig(dim=e.dim, buckets=e.buckets,
                                   projection_seed=e.projection_seed,
                                   text_salt=e.text_salt))


def make_model_config(config: RunConfig) -> ModelConfig:
    m = config.model
    return ModelConfig(
        frame_size=config.world.frame_size,
        patch=config.codec.patch,
        d_model=m.d_model,
        blocks=m.blocks,
        heads=m.heads,
        mlp_ratio=m.mlp_ratio,
        text_len=m.text_len,
        text_buckets=m.text_buckets,
        text_salt=config.embedder.text_salt,
        prev_frame_grid=m.prev_frame_grid,
        memory_patch=m.memory_patch,
        init_seed=derive_seed(config.seed, 11),
    )


def make_train_config(config: RunConfig) -> TrainConfig:
    t = config.train
    return TrainConfig(
        learning_rate=t.learning_rate,
        batch_size=t.batch_size,
        sft_steps=t.sft_steps,
        dpo_steps=t.dpo_steps,
        beta=t.beta,
        coupled_noise=t.coupled_noise,
        seed=derive_seed(config.seed, 12),
        checkpoint_every=t.checkpoint_every,
        log_every=t.log_every,
    )


def make_solver(config: RunConfig) -> SolverConfig:
    return SolverConfig(num_steps=config.solver.num_steps,
                        scheme=config.solver.scheme,
                        seed=derive_seed(config.seed, 13))
