"""Command-line entry point binding all modules into reproducible runs."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .errors import ConfigError, MultishotError
from .model import load_checkpoint
from .pipeline import (JsonHttpClient, JsonSubprocessClient, Storyboard,
                       generate_anchors, load_run_dir, parse_storyboard_shots,
                       run_pipeline)
from .seeding import derive_seed
from .training import build_preference_dataset, run_two_stage
from .world import (ExportConfig, FramePair, export_dataset, frame_to_png_bytes,
                    generate_story, load_story_dir)

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = ("no_mmp", "no_des", "no_tts")


def _make_client(endpoint):
    if endpoint is None:
        return None
    if isinstance(endpoint, str):
        return JsonHttpClient(endpoint)
    if isinstance(endpoint, list):
        return JsonSubprocessClient([str(x) for x in endpoint])
    raise ConfigError(f"endpoint must be a URL string or argv list, got {endpoint!r}")


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config_file(args.config) if args.config else cfgmod.RunConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_root"] = args.out
    if args.deterministic:
        updates["deterministic"] = True
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    if cfg.deterministic:
        torch.set_num_threads(1)
    return cfg


def _training_stories(cfg: cfgmod.RunConfig, stream: int, count: int, shots: int):
    return [generate_story(derive_seed(cfg.seed, stream, i), shots, cfg.world)
            for i in range(count)]


def cmd_dataset(cfg: cfgmod.RunConfig) -> int:
    out = Path(cfg.out_root) / "dataset"
    cfgmod.persist_resolved(cfg, out)
    export_dataset(ExportConfig(
        out_dir=str(out),
        seed=cfg.seed,
        train_stories=cfg.dataset.train_stories,
        test_stories=cfg.dataset.test_stories,
        min_shots=cfg.dataset.min_shots,
        max_shots=cfg.dataset.max_shots,
        world=cfg.world,
    ))
    print(f"dataset written to {out}")
    return 0


def cmd_train(cfg: cfgmod.RunConfig, stage: str) -> int:
    out = Path(cfg.out_root) / "train"
    cfgmod.persist_resolved(cfg, out)
    stories = _training_stories(cfg, 21, cfg.train.stories, cfg.train.story_shots)
    heldout_stories = _training_stories(cfg, 22, cfg.train.heldout_stories,
                                        cfg.train.story_shots)
    train_config = cfgmod.make_train_config(cfg)
    heldout = build_preference_dataset(heldout_stories, train_config.seed)
    result = run_two_stage(
        train_config, stories, out,
        model_config=cfgmod.make_model_config(cfg),
        codec=cfgmod.make_codec(cfg),
        embedder=cfgmod.make_embedder(cfg),
        stage=stage,
        heldout_tuples=heldout,
        deterministic=cfg.deterministic,
    )
    print(f"sft checkpoint: {result.sft_checkpoint}")
    if result.dpo_checkpoint:
        print(f"dpo checkpoint: {result.dpo_checkpoint}")
    print(f"metrics log: {result.metrics_path}")
    return 0


def _load_model(cfg: cfgmod.RunConfig, checkpoint: str | None):
    path = checkpoint or cfg.pipeline.checkpoint
    if path is None:
        path = _default_checkpoint(cfg)
    if path is None or not Path(path).exists():
        raise MultishotError(
            "no model checkpoint found; run `multishot train` or pass --checkpoint")
    model, _ = load_checkpoint(path, cfgmod.make_codec(cfg))
    return model, str(path)


def _default_checkpoint(cfg: cfgmod.RunConfig):
    train_dir = Path(cfg.out_root) / "train"
    for stage in ("dpo", "sft"):
        steps = cfg.train.dpo_steps if stage == "dpo" else cfg.train.sft_steps
        path = train_dir / f"stage-{stage}-step-{steps}.pt"
        if path.exists():
            return path
    return None


def cmd_sample(cfg: cfgmod.RunConfig, storyboard_path: str,
               checkpoint: str | None) -> int:
    model, ckpt = _load_model(cfg, checkpoint)
    board_json = json.loads(Path(storyboard_path).read_text())
    shots = parse_storyboard_shots(board_json["shots"])
    storyboard = Storyboard(shots=shots, theme=board_json.get("theme", ""))
    out = Path(cfg.out_root) / "samples" / Path(storyboard_path).stem
    cfgmod.persist_resolved(cfg, out)
    anchors = generate_anchors(model, storyboard, cfgmod.make_embedder(cfg),
                               cfgmod.make_solver(cfg))
    records = []
    for i, pair in enumerate(anchors):
        (out / f"{i}_start.png").write_bytes(frame_to_png_bytes(pair.start))
        (out / f"{i}_end.png").write_bytes(frame_to_png_bytes(pair.end))
        records.append({"shot": i, "start": f"{i}_start.png", "end": f"{i}_end.png"})
    (out / "anchors.json").write_text(json.dumps(
        {"checkpoint": ckpt, "anchors": records}, indent=2, sort_keys=True))
    print(f"anchors written to {out}")
    return 0


def cmd_run(cfg: cfgmod.RunConfig, theme: str, checkpoint: str | None) -> int:
    model, ckpt = _load_model(cfg, checkpoint)
    out_root = Path(cfg.out_root) / "run"
    video = run_pipeline(
        theme, model, cfgmod.make_embedder(cfg), out_root,
        num_shots=cfg.pipeline.num_shots,
        solver=cfgmod.make_solver(cfg),
        clip_length=cfg.pipeline.clip_length,
        director_client=_make_client(cfg.pipeline.director_endpoint),
        refiner_client=_make_client(cfg.pipeline.refiner_endpoint),
        video_client=_make_client(cfg.pipeline.video_endpoint),
        config_snapshot={"resolved": cfgmod.resolved_dict(cfg), "checkpoint": ckpt},
        world_config=cfg.world,
    )
    run_dir = out_root / video.provenance["run_id"]
    cfgmod.persist_resolved(cfg, run_dir)
    print(f"run written to {run_dir} ({len(video.clips)} clips, "
          f"boundaries {video.boundaries})")
    return 0


def cmd_eval(cfg: cfgmod.RunConfig, run_dir: str, reference: str | None) -> int:
    from .metrics import report

    storyboard, video = load_run_dir(run_dir)
    ref_pairs = None
    if reference:
        _, clips = load_story_dir(reference)
        ref_pairs = [FramePair(start=c[0], end=c[-1]) for c in clips]
    rep = report(video, storyboard, ref_pairs, cfgmod.make_embedder(cfg))
    out_path = Path(run_dir) / "eval.json"
    out_path.write_text(rep.to_json())
    print(rep.to_json())
    return 0


def cmd_ablate(cfg: cfgmod.RunConfig, variant: str) -> int:
    from .metrics import report as metrics_report

    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    train_dir = Path(cfg.out_root) / "train"
    full_path = train_dir / f"stage-dpo-step-{cfg.train.dpo_steps}.pt"
    sft_path = train_dir / f"stage-sft-step-{cfg.train.sft_steps}.pt"
    if not full_path.exists() or not sft_path.exists():
        raise MultishotError("ablation needs both sft and dpo checkpoints; "
                             "run `multishot train --stage both` first")
    codec = cfgmod.make_codec(cfg)
    embedder = cfgmod.make_embedder(cfg)
    full_model, _ = load_checkpoint(full_path, codec)
    variant_model = full_model
    memory_off = variant == "no_mmp"
    independent = variant == "no_des"
    if variant == "no_tts":
        variant_model, _ = load_checkpoint(sft_path, codec)

    stories = _training_stories(cfg, 21, cfg.train.stories, cfg.train.story_shots)
    results = []
    for s_idx, story in enumerate(stories):
        board = Storyboard(
            shots=tuple(parse_storyboard_shots([
                {"description": s.description, "attributes": s.attributes.to_dict()}
                for s in story.storyboard])),
            theme=f"story-{story.seed}")
        solver = dataclasses.replace(cfgmod.make_solver(cfg),
                                     seed=derive_seed(cfg.seed, 31, s_idx))
        sides = {}
        for side, (mdl, m_off, ind) in {
            "base": (full_model, False, False),
            "variant": (variant_model, memory_off, independent),
        }.items():
            video = _synthesize_in_memory(mdl, board, embedder, solver,
                                          m_off, ind, story)
            sides[side] = metrics_report(video, board, story, embedder).to_dict()
        results.append({"story_seed": story.seed, "base": sides["base"],
                        "variant": sides["variant"]})

    summary = _ablation_summary(variant, results)
    out = Path(cfg.out_root) / f"ablate_{variant}"
    cfgmod.persist_resolved(cfg, out)
    (out / "report.json").write_text(json.dumps(
        {"variant": variant, "summary": summary, "stories": results},
        indent=2, sort_keys=True))
    print(json.dumps({"variant": variant, "summary": summary}, indent=2,
                     sort_keys=True))
    return 0


def _synthesize_in_memory(model, board, embedder, solver, memory_off,
                          independent, story):
    from .pipeline import MultiShotVideo, refine, synthesize_clip

    anchors = generate_anchors(model, board, embedder, solver,
                               memory_off=memory_off,
                               independent_halves=independent)
    clips = []
    for i, (shot, pair) in enumerate(zip(board.shots, anchors)):
        prompt = refine(shot, pair, embedder, shot_index=i)
        clips.append(synthesize_clip(prompt, pair, shot.attributes.shot_length,
                                     model.codec))
    boundaries = list(np.cumsum([len(c) for c in clips])[:-1].astype(int))
    return MultiShotVideo(clips=clips, boundaries=[int(b) for b in boundaries],
                          anchors=anchors, provenance={})


def _ablation_summary(variant: str, results: list[dict]) -> dict:
    metric_keys = {"no_mmp": ("sc_e", "bc_e"), "no_des": ("sc", "bc"),
                   "no_tts": ("tvs",)}[variant]
    summary = {}
    for key in metric_keys:
        wins = sum(1 for r in results
                   if r["variant"][key] is not None and r["base"][key] is not None
                   and r["variant"][key] <= r["base"][key])
        total = sum(1 for r in results if r["variant"][key] is not None
                    and r["base"][key] is not None)
        summary[key] = {"variant_leq_base": wins, "stories": total,
                        "fraction": wins / total if total else None}
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="multishot",
        description="Storyboard-anchored multi-shot generation toolkit")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output root directory")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded numeric paths")

    common(sub.add_parser("dataset", help="export a procedural dataset"))

    p_train = sub.add_parser("train", help="run the two-stage training")
    common(p_train)
    p_train.add_argument("--stage", choices=("sft", "dpo", "both"), default="both")

    p_sample = sub.add_parser("sample", help="generate anchors for a storyboard")
    common(p_sample)
    p_sample.add_argument("--storyboard", required=True)
    p_sample.add_argument("--checkpoint", default=None)

    p_run = sub.add_parser("run", help="full theme-to-video pipeline")
    common(p_run)
    p_run.add_argument("--theme", required=True)
    p_run.add_argument("--checkpoint", default=None)

    p_eval = sub.add_parser("eval", help="score a pipeline run")
    common(p_eval)
    p_eval.add_argument("--run-dir", required=True)
    p_eval.add_argument("--reference", default=None,
                        help="dataset story directory with ground-truth clips")

    p_ablate = sub.add_parser("ablate", help="directional ablation comparison")
    common(p_ablate)
    p_ablate.add_argument("--variant", choices=ABLATION_VARIANTS, required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "dataset":
            return cmd_dataset(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage)
        if args.command == "sample":
            return cmd_sample(cfg, args.storyboard, args.checkpoint)
        if args.command == "run":
            return cmd_run(cfg, args.theme, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.run_dir, args.reference)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.variant)
        parser.error(f"unknown command {args.command}")
    except (MultishotError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
