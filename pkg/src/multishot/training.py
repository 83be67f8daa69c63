"""Two-stage optimization: flow-matching supervised training, then preference
alignment against a frozen reference model.

Stage one regresses the constant velocity (clean pair minus noise) along
linear interpolants. Stage two maximizes the log-sigmoid preference margin
between true start-end pairs and internal-frame negatives from the same clip.
All randomness flows through numpy generators handed in by the caller, so runs
are reproducible and resumable bit-for-bit in single-threaded mode.
"""

from __future__ import annotations

import copy
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .embed import Embedder
from .errors import NumericError
from .memory import build_memory
from .model import (ModelConfig, PairPredictor, joint_encode, load_checkpoint,
                    save_checkpoint)
from .seeding import derive_seed, make_rng
from .world import FramePair, ShotAttributes, StoryInstance, extract_pair, \
    sample_internal_negative

logger = logging.getLogger(__name__)

_default_embedder = None


def _get_embedder(embedder):
    global _default_embedder
    if embedder is not None:
        return embedder
    if _default_embedder is None:
        _default_embedder = Embedder()
    return _default_embedder


@dataclass(frozen=True)
class TrainSample:
    pair: FramePair
    description: str
    attributes: ShotAttributes
    history: tuple[FramePair, ...]  # pairs of all preceding shots, in order
    story_seed: int = 0
    shot_index: int = 0


@dataclass(frozen=True)
class PreferenceTuple:
    positive: FramePair  # the true start-end pair
    negative: FramePair  # two internal frames of the same clip
    description: str
    attributes: ShotAttributes
    history: tuple[FramePair, ...]
    story_seed: int = 0
    shot_index: int = 0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    sft_steps: int = 2000
    dpo_steps: int = 400
    beta: float = 50.0
    coupled_noise: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.sft_steps,
               self.dpo_steps, self.beta) <= 0:
            raise ValueError("train config values must be positive")


def interpolate(x1, x0, t: float):
    """Linear path between noise (t=0) and data (t=1); endpoints are exact."""
    if getattr(x1, "shape", None) != getattr(x0, "shape", None):
        raise ValueError(f"shape mismatch: {x1.shape} vs {x0.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return t * x1 + (1.0 - t) * x0


def build_train_samples(stories: list[StoryInstance]) -> list[TrainSample]:
    samples = []
    for story in stories:
        for i, shot in enumerate(story.storyboard):
            samples.append(TrainSample(
                pair=story.pairs[i],
                description=shot.description,
                attributes=shot.attributes,
                history=tuple(story.pairs[:i]),
                story_seed=story.seed,
                shot_index=i,
            ))
    return samples


def build_preference_dataset(stories: list[StoryInstance],
                             seed: int) -> list[PreferenceTuple]:
    """One tuple per shot whose clip has at least two internal frames.

    Shorter clips are skipped; the skip count is logged as a warning.
    """
    tuples = []
    skipped = 0
    for story in stories:
        for i, (shot, clip) in enumerate(zip(story.storyboard, story.clips)):
            if len(clip) < 4:
                skipped += 1
                continue
            tuples.append(PreferenceTuple(
                positive=extract_pair(clip),
                negative=sample_internal_negative(
                    clip, derive_seed(seed, story.seed, i)),
                description=shot.description,
                attributes=shot.attributes,
                history=tuple(story.pairs[:i]),
                story_seed=story.seed,
                shot_index=i,
            ))
    if skipped:
        logger.warning("skipped %d clips with fewer than 2 internal frames", skipped)
    return tuples


def _context_batch(model: PairPredictor, items) -> torch.Tensor:
    ctxs = []
    for item in items:
        prev = item.history[-1].end if item.history else None
        ctxs.append(model.encode_context(prev, item.description, item.attributes))
    return torch.stack(ctxs)


def _memory_batch(model: PairPredictor, items, embedder) -> torch.Tensor:
    grids = []
    for item in items:
        query = embedder.embed_text(item.description)
        token = build_memory(list(item.history), query, model.codec, embedder)
        grids.append(token.grid)
    return torch.as_tensor(np.stack(grids), dtype=model.dtype)


def sft_loss(model: PairPredictor, batch: list[TrainSample],
             rng: np.random.Generator, embedder=None) -> torch.Tensor:
    """Mean squared velocity error over tokens, channels, and batch."""
    if not batch:
        raise ValueError("batch must be non-empty")
    embedder = _get_embedder(embedder)
    shape = (2,) + model.codec.latent_shape
    x1s, x0s, ts = [], [], []
    for sample in batch:
        x1s.append(joint_encode(sample.pair, model.codec))
        ts.append(rng.uniform(0.0, 1.0))
        x0s.append(rng.standard_normal(shape))
    x1 = torch.as_tensor(np.stack(x1s), dtype=model.dtype)
    x0 = torch.as_tensor(np.stack(x0s), dtype=model.dtype)
    t = torch.as_tensor(np.array(ts), dtype=model.dtype)
    x_t = t[:, None, None, None, None] * x1 + (1.0 - t[:, None, None, None, None]) * x0

    ctx = _context_batch(model, batch)
    mem = _memory_batch(model, batch, embedder)
    v = model(mem, ctx, t, x_t)
    loss = ((v - (x1 - x0)) ** 2).mean()
    if not torch.isfinite(loss):
        raise NumericError("sft loss is not finite")
    return loss


def _pair_errors(model: PairPredictor, items, x_t: torch.Tensor, t: torch.Tensor,
                 target: torch.Tensor, embedder) -> torch.Tensor:
    ctx = _context_batch(model, items)
    mem = _memory_batch(model, items, embedder)
    v = model(mem, ctx, t, x_t)
    return ((v - target) ** 2).mean(dim=(1, 2, 3, 4))


def _dpo_draws(batch, codec, rng: np.random.Generator, coupled: bool):
    shape = (2,) + codec.latent_shape
    xw1, xl1, x0w, x0l, tw, tl = [], [], [], [], [], []
    for tup in batch:
        xw1.append(joint_encode(tup.positive, codec))
        xl1.append(joint_encode(tup.negative, codec))
        t = rng.uniform(0.0, 1.0)
        noise = rng.standard_normal(shape)
        tw.append(t)
        x0w.append(noise)
        if coupled:
            tl.append(t)
            x0l.append(noise)
        else:
            tl.append(rng.uniform(0.0, 1.0))
            x0l.append(rng.standard_normal(shape))
    return (np.stack(xw1), np.stack(xl1), np.stack(x0w), np.stack(x0l),
            np.array(tw), np.array(tl))


def preference_difference(model: PairPredictor, batch: list[PreferenceTuple],
                          draws, embedder) -> torch.Tensor:
    """Per-tuple D: error on the negative minus error on the positive."""
    xw1, xl1, x0w, x0l, tw, tl = draws
    dt = model.dtype
    xw1_t = torch.as_tensor(xw1, dtype=dt)
    xl1_t = torch.as_tensor(xl1, dtype=dt)
    x0w_t = torch.as_tensor(x0w, dtype=dt)
    x0l_t = torch.as_tensor(x0l, dtype=dt)
    tw_t = torch.as_tensor(tw, dtype=dt)
    tl_t = torch.as_tensor(tl, dtype=dt)

    def lerp(x1, x0, t):
        t = t[:, None, None, None, None]
        return t * x1 + (1.0 - t) * x0

    err_l = _pair_errors(model, batch, lerp(xl1_t, x0l_t, tl_t), tl_t,
                         xl1_t - x0l_t, embedder)
    err_w = _pair_errors(model, batch, lerp(xw1_t, x0w_t, tw_t), tw_t,
                         xw1_t - x0w_t, embedder)
    return err_l - err_w


def dpo_loss(policy: PairPredictor, reference: PairPredictor,
             batch: list[PreferenceTuple], rng: np.random.Generator,
             beta: float, coupled_noise: bool = True, embedder=None) -> torch.Tensor:
    """-mean log sigmoid(beta * (D_policy - D_reference)) over the batch."""
    if not batch:
        raise ValueError("batch must be non-empty")
    if policy.config != reference.config:
        raise ValueError("policy and reference architectures differ")
    embedder = _get_embedder(embedder)
    draws = _dpo_draws(batch, policy.codec, rng, coupled_noise)
    d_policy = preference_difference(policy, batch, draws, embedder)
    with torch.no_grad():
        d_ref = preference_difference(reference, batch, draws, embedder)
    loss = -F.logsigmoid(beta * (d_policy - d_ref)).mean()
    if not torch.isfinite(loss):
        raise NumericError("dpo loss is not finite")
    return loss


def preference_margins(model: PairPredictor, tuples: list[PreferenceTuple],
                       seed: int, embedder=None,
                       coupled_noise: bool = True) -> np.ndarray:
    """Per-tuple D under a fixed evaluation seed (comparable across models)."""
    embedder = _get_embedder(embedder)
    draws = _dpo_draws(tuples, model.codec, make_rng(seed, 77), coupled_noise)
    with torch.no_grad():
        d = preference_difference(model, tuples, draws, embedder)
    return d.numpy().astype(np.float64)


def calibrate_beta(model: PairPredictor, tuples: list[PreferenceTuple], seed: int,
                   embedder=None, target: float = 1.0) -> float:
    """Pick beta so the typical |beta * D| of the starting model is near target.

    At the start of alignment the policy equals the reference, so the policy's
    own per-tuple D magnitude is the available scale proxy.
    """
    d = preference_margins(model, tuples, seed, embedder)
    scale = float(np.median(np.abs(d)))
    if scale < 1e-12:
        return 50.0
    return float(np.clip(target / scale, 1e-3, 1e6))


# ---------------- two-stage runner ----------------


@dataclass
class TwoStageResult:
    sft_checkpoint: Path | None
    dpo_checkpoint: Path | None
    metrics_path: Path


def _latest_checkpoint(out_dir: Path, stage: str, max_step: int):
    best = None
    for p in out_dir.glob(f"stage-{stage}-step-*.pt"):
        m = re.match(rf"stage-{stage}-step-(\d+)\.pt", p.name)
        if m and int(m.group(1)) <= max_step:
            if best is None or int(m.group(1)) > best[0]:
                best = (int(m.group(1)), p)
    return best


def _log_metrics(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _run_stage(stage: str, model: PairPredictor, data: list, loss_fn,
               config: TrainConfig, steps: int, out_dir: Path,
               metrics_path: Path, margin_fn=None) -> Path:
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(config.adam_beta1, config.adam_beta2))
    rng = make_rng(config.seed, 101 if stage == "sft" else 202)
    start = 0
    resume = _latest_checkpoint(out_dir, stage, steps)
    if resume is not None:
        step0, path = resume
        _, payload = load_checkpoint(path)
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["extra"]["optimizer"])
        rng.bit_generator.state = payload["extra"]["rng_state"]
        start = step0
        logger.info("resuming %s stage from step %d", stage, start)

    model.train()
    for step in range(start, steps):
        idx = rng.choice(len(data), size=min(config.batch_size, len(data)),
                         replace=False)
        batch = [data[int(i)] for i in idx]
        opt.zero_grad()
        loss = loss_fn(model, batch, rng)
        if not torch.isfinite(loss):
            raise NumericError(f"{stage} diverged at step {step}: loss={loss}")
        loss.backward()
        opt.step()
        done = step + 1
        if step % config.log_every == 0 or done == steps:
            record = {"step": step, "stage": stage, "loss": float(loss.item())}
            if margin_fn is not None:
                record["margin"] = margin_fn(model)
            _log_metrics(metrics_path, record)
        if done % config.checkpoint_every == 0 or done == steps:
            save_checkpoint(model, out_dir / f"stage-{stage}-step-{done}.pt",
                            stage, done,
                            extra={"optimizer": opt.state_dict(),
                                   "rng_state": rng.bit_generator.state})
    model.eval()
    return out_dir / f"stage-{stage}-step-{steps}.pt"


def run_two_stage(config: TrainConfig, stories: list[StoryInstance],
                  out_dir: str | Path, model_config: ModelConfig = ModelConfig(),
                  codec=None, embedder=None, stage: str = "both",
                  heldout_tuples: list[PreferenceTuple] | None = None,
                  deterministic: bool = True) -> TwoStageResult:
    """Train stage one and/or two, with checkpoints, logs, and resume support."""
    if stage not in ("sft", "dpo", "both"):
        raise ValueError(f"unknown stage {stage!r}")
    if not stories:
        raise ValueError("dataset must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    if deterministic:
        torch.set_num_threads(1)
    embedder = _get_embedder(embedder)

    torch.manual_seed(model_config.init_seed)
    model = PairPredictor(model_config, codec)

    sft_path = out_dir / f"stage-sft-step-{config.sft_steps}.pt"
    if stage in ("sft", "both"):
        samples = build_train_samples(stories)
        sft_path = _run_stage(
            "sft", model, samples,
            lambda m, b, r: sft_loss(m, b, r, embedder),
            config, config.sft_steps, out_dir, metrics_path)
    elif not sft_path.exists():
        raise ValueError(f"dpo stage requires an SFT checkpoint at {sft_path}")

    dpo_path = None
    if stage in ("dpo", "both"):
        policy, _ = load_checkpoint(sft_path)
        reference, _ = load_checkpoint(sft_path)
        for p in reference.parameters():
            p.requires_grad_(False)
        reference.eval()

        tuples = build_preference_dataset(stories, config.seed)
        if not tuples:
            raise ValueError("no preference tuples could be built from the dataset")
        margin_fn = None
        if heldout_tuples:
            ref_margin = float(np.mean(preference_margins(
                reference, heldout_tuples, config.seed, embedder)))

            def margin_fn(m):
                pol = float(np.mean(preference_margins(
                    m, heldout_tuples, config.seed, embedder)))
                return pol - ref_margin

        dpo_path = _run_stage(
            "dpo", policy, tuples,
            lambda m, b, r: dpo_loss(m, reference, b, r, config.beta,
                                     config.coupled_noise, embedder),
            config, config.dpo_steps, out_dir, metrics_path, margin_fn=margin_fn)

    return TwoStageResult(
        sft_checkpoint=sft_path if sft_path.exists() else None,
        dpo_checkpoint=dpo_path,
        metrics_path=metrics_path,
    )


# ---------------- gradient checking ----------------


def make_sft_loss_fn(model: PairPredictor, batch: list[TrainSample], seed: int,
                     embedder=None):
    """A pure function of the parameters: draws are re-seeded on every call."""
    return lambda: sft_loss(model, batch, make_rng(seed, 303), embedder)


def make_dpo_loss_fn(policy: PairPredictor, reference: PairPredictor,
                     batch: list[PreferenceTuple], seed: int, beta: float,
                     embedder=None):
    return lambda: dpo_loss(policy, reference, batch, make_rng(seed, 404),
                            beta, embedder=embedder)


def finite_difference(loss_fn, param: torch.nn.Parameter, index: int,
                      epsilon: float) -> float:
    """Central difference of the loss along one parameter coordinate."""
    flat = param.data.view(-1)
    orig = flat[index].item()
    with torch.no_grad():
        flat[index] = orig + epsilon
    f_plus = loss_fn().item()
    with torch.no_grad():
        flat[index] = orig - epsilon
    f_minus = loss_fn().item()
    with torch.no_grad():
        flat[index] = orig
    return (f_plus - f_minus) / (2.0 * epsilon)


def grad_check(loss_fn, model: PairPredictor, epsilon: float = 1e-5,
               num_coords: int = 32, seed: int = 0,
               coords: list[tuple[str, int]] | None = None) -> float:
    """Max relative error between autograd and central finite differences.

    Meant for tiny models in float64; coordinates are sampled uniformly over
    all parameters unless given explicitly as (param_name, flat_index).
    """
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    named = dict(model.named_parameters())
    if coords is None:
        rng = make_rng(seed, 505)
        names = sorted(named)
        sizes = np.array([named[n].numel() for n in names])
        total = int(sizes.sum())
        picks = rng.choice(total, size=min(num_coords, total), replace=False)
        bounds = np.cumsum(sizes)
        coords = []
        for p in sorted(int(x) for x in picks):
            k = int(np.searchsorted(bounds, p, side="right"))
            offset = p - (0 if k == 0 else int(bounds[k - 1]))
            coords.append((names[k], offset))
    max_rel = 0.0
    for name, index in coords:
        param = named[name]
        analytic = 0.0 if param.grad is None else param.grad.view(-1)[index].item()
        numeric = finite_difference(loss_fn, param, index, epsilon)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel
