"""Three-stage workflow: direct a storyboard, generate anchor pairs shot by
shot, then refine prompts and synthesize each clip between its anchors.

The built-in director, refiner, and clip synthesizer are deterministic
templates so the whole pipeline runs offline; each can be swapped for an
external service speaking JSON over HTTP or over subprocess stdio.
"""

from __future__ import annotations

import base64
import json
import subprocess
import urllib.error
import urllib.request
from dataclasses import dataclass, replace

import numpy as np
import torch

from .embed import cosine
from .errors import (DirectorProtocolError, PipelineStageError, ProtocolError,
                     RefinerProtocolError, VideoProtocolError)
from .memory import build_memory, zero_token
from .model import PairPredictor, SolverConfig
from .seeding import derive_seed, text_seed
from .world import (BACKGROUND_PALETTE, ENTITY_PALETTE, Frame, FramePair,
                    ShotAttributes, WorldConfig, frame_to_png_bytes,
                    generate_story, png_bytes_to_frame)


@dataclass(frozen=True)
class ShotPrompt:
    description: str
    attributes: ShotAttributes


@dataclass(frozen=True)
class Storyboard:
    shots: tuple[ShotPrompt, ...]
    theme: str

    def __post_init__(self):
        if not self.shots:
            raise ValueError("storyboard needs at least one shot")


@dataclass(frozen=True)
class RefinedPrompt:
    text: str
    shot_index: int

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("refined prompt must be non-empty")


@dataclass
class MultiShotVideo:
    clips: list[list[Frame]]
    boundaries: list[int]  # cut positions in the concatenated frame stream
    anchors: list[FramePair]
    provenance: dict


# ---------------- external clients ----------------


class JsonHttpClient:
    """POSTs one JSON document, expects one JSON document back."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def call(self, payload: dict) -> dict:
        req = urllib.request.Request(
            self.url, data=json.dumps(payload).encode("utf-8"), method="POST",
            headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                if not 200 <= resp.status < 300:
                    raise ProtocolError(f"status {resp.status}")
                return json.loads(resp.read().decode("utf-8"))
        except ProtocolError:
            raise
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise ProtocolError(str(exc)) from exc


class JsonSubprocessClient:
    """Runs a command with JSON on stdin and reads JSON from stdout."""

    def __init__(self, command: list[str], timeout: float = 60.0):
        self.command = command
        self.timeout = timeout

    def call(self, payload: dict) -> dict:
        try:
            proc = subprocess.run(
                self.command, input=json.dumps(payload).encode("utf-8"),
                capture_output=True, timeout=self.timeout)
        except (subprocess.TimeoutExpired, OSError) as exc:
            raise ProtocolError(str(exc)) from exc
        if proc.returncode != 0:
            raise ProtocolError(f"exit code {proc.returncode}: "
                                f"{proc.stderr.decode(errors='replace')[:200]}")
        try:
            return json.loads(proc.stdout.decode("utf-8"))
        except ValueError as exc:
            raise ProtocolError(f"bad JSON from subprocess: {exc}") from exc


def _b64_png(frame: Frame) -> str:
    return base64.b64encode(frame_to_png_bytes(frame)).decode("ascii")


def _frame_from_b64(data: str) -> Frame:
    return png_bytes_to_frame(base64.b64decode(data))


# ---------------- stage 1: director ----------------


def parse_storyboard_shots(records: list, expected_shots: int | None = None) -> tuple:
    """Validate storyboard shot records against the published schema."""
    if not isinstance(records, list) or not records:
        raise ValueError("storyboard must contain a non-empty shot list")
    if expected_shots is not None and len(records) != expected_shots:
        raise ValueError(f"expected {expected_shots} shots, got {len(records)}")
    shots = []
    for rec in records:
        desc = rec.get("description")
        attrs = rec.get("attributes", {})
        if not isinstance(desc, str) or not desc.strip():
            raise ValueError("shot description must be a non-empty string")
        shots.append(ShotPrompt(
            description=desc,
            attributes=ShotAttributes(
                shot_scale=attrs.get("shot_scale"),
                shot_length=attrs.get("shot_length"),
                camera_angle=attrs.get("camera_angle"),
                camera_movement=attrs.get("camera_movement"),
            ),
        ))
    return tuple(shots)


def direct(theme: str, num_shots: int, client=None,
           world_config: WorldConfig = WorldConfig()) -> Storyboard:
    """Turn a theme into a storyboard.

    The built-in director hashes the theme into a story seed and emits that
    story's shot specs (alternating scales, at most two consecutive static
    shots). An external client's JSON output is schema-validated instead.
    """
    if not theme.strip():
        raise ValueError("theme must be non-empty")
    if num_shots < 1:
        raise ValueError("num_shots must be >= 1")
    if client is None:
        story = generate_story(text_seed(theme), num_shots, world_config)
        shots = tuple(ShotPrompt(s.description, s.attributes)
                      for s in story.storyboard)
        return Storyboard(shots=shots, theme=theme)
    try:
        body = client.call({"theme": theme, "num_shots": num_shots})
        shots = parse_storyboard_shots(body.get("shots"), num_shots)
    except (ProtocolError, ValueError, TypeError, KeyError) as exc:
        raise DirectorProtocolError(f"invalid director response: {exc}") from exc
    return Storyboard(shots=shots, theme=theme)


# ---------------- stage 2: iterative anchor generation ----------------


def generate_anchors(model: PairPredictor, storyboard: Storyboard, embedder,
                     solver: SolverConfig = SolverConfig(),
                     memory_off: bool = False,
                     independent_halves: bool = False) -> list[FramePair]:
    """Sample one anchor pair per shot, feeding earlier pairs back as memory.

    Only generated pairs (never ground truth) enter the memory bank and the
    previous-frame slot. memory_off zeroes the packed memory token;
    independent_halves integrates start and end with separate noise.
    """
    history: list[FramePair] = []
    with torch.no_grad():
        for i, shot in enumerate(storyboard.shots):
            if memory_off or not history:
                mem = zero_token(model.codec.latent_shape)
            else:
                query = embedder.embed_text(shot.description)
                mem = build_memory(history, query, model.codec, embedder)
            prev = history[-1].end if history else None
            ctx = model.encode_context(prev, shot.description, shot.attributes)
            if independent_halves:
                run_a = model.sample_pair(ctx, mem, replace(
                    solver, seed=derive_seed(solver.seed, i, 0)))
                run_b = model.sample_pair(ctx, mem, replace(
                    solver, seed=derive_seed(solver.seed, i, 1)))
                pair = FramePair(start=run_a.start, end=run_b.end)
            else:
                pair = model.sample_pair(ctx, mem, replace(
                    solver, seed=derive_seed(solver.seed, i)))
            history.append(pair)
    return history


# ---------------- stage 3: refine and synthesize ----------------


_ALL_COLORS = {**ENTITY_PALETTE, **BACKGROUND_PALETTE}


def _dominant_color_name(frame: Frame) -> str:
    mean = np.asarray(frame, dtype=np.float64).mean(axis=(0, 1))
    names = list(_ALL_COLORS)
    dists = [np.linalg.norm(mean - np.asarray(_ALL_COLORS[n])) for n in names]
    return names[int(np.argmin(dists))]


def refine(shot: ShotPrompt, pair: FramePair, embedder, shot_index: int = 0,
           client=None) -> RefinedPrompt:
    """Merge the shot spec with observations of its anchor pair into one prompt."""
    attrs = shot.attributes
    if client is not None:
        try:
            body = client.call({
                "description": shot.description,
                "attributes": attrs.to_dict(),
                "start_png_b64": _b64_png(pair.start),
                "end_png_b64": _b64_png(pair.end),
                "shot_index": shot_index,
            })
            text = body.get("text")
            if not isinstance(text, str) or not text.strip():
                raise ValueError("refiner returned empty text")
            if shot.description not in text or attrs.camera_movement not in text:
                raise ValueError(
                    "refined prompt must quote the description and camera movement")
        except (ProtocolError, ValueError, TypeError) as exc:
            raise RefinerProtocolError(f"invalid refiner response: {exc}") from exc
        return RefinedPrompt(text=text, shot_index=shot_index)

    motion = round(1.0 - cosine(embedder.embed_frame(pair.start),
                                embedder.embed_frame(pair.end)), 3)
    text = (
        f"{shot.description} Cinematic framing: {attrs.shot_scale} scale, "
        f"{attrs.camera_angle} angle, {attrs.camera_movement} movement over "
        f"{attrs.shot_length} frames. Anchors open on {_dominant_color_name(pair.start)} "
        f"tones and close on {_dominant_color_name(pair.end)} tones; "
        f"motion magnitude {motion:.3f}."
    )
    if attrs.camera_movement == "static":
        text += " The camera holds perfectly still."
    return RefinedPrompt(text=text, shot_index=shot_index)


def synthesize_clip(refined: RefinedPrompt, pair: FramePair, length: int,
                    codec, client=None) -> list[Frame]:
    """Fill a clip between its anchors.

    Built-in stub: linear interpolation in latent space with exact anchor
    endpoints. An external generator receives the refined prompt plus both
    anchors as PNGs and returns the full frame sequence.
    """
    if length < 2:
        raise ValueError("clip length must be >= 2")
    if client is not None:
        try:
            body = client.call({
                "prompt": refined.text,
                "start_png_b64": _b64_png(pair.start),
                "end_png_b64": _b64_png(pair.end),
                "length": length,
            })
            frames_b64 = body.get("frames")
            if not isinstance(frames_b64, list) or len(frames_b64) != length:
                raise ValueError(f"expected {length} frames")
            return [_frame_from_b64(f) for f in frames_b64]
        except (ProtocolError, ValueError, TypeError) as exc:
            raise VideoProtocolError(f"invalid video response: {exc}") from exc

    z0 = codec.encode(pair.start)
    z1 = codec.encode(pair.end)
    frames = [pair.start]
    for k in range(1, length - 1):
        tau = k / (length - 1)
        frames.append(codec.decode((1.0 - tau) * z0 + tau * z1, clip=True))
    frames.append(pair.end)
    return frames


# ---------------- orchestration ----------------


def run_id_for(theme: str, seed: int) -> str:
    return f"{text_seed(theme):08x}-s{seed}"


def run_pipeline(theme: str, model: PairPredictor, embedder, out_root,
                 num_shots: int = 4, solver: SolverConfig = SolverConfig(),
                 clip_length: int | None = None, memory_off: bool = False,
                 independent_halves: bool = False, director_client=None,
                 refiner_client=None, video_client=None,
                 config_snapshot: dict | None = None,
                 world_config: WorldConfig = WorldConfig()) -> MultiShotVideo:
    """Direct, generate anchors, refine, synthesize, and concatenate.

    Every stage persists its artifacts before the next begins, so a failed run
    leaves partial output plus the failing stage name behind.
    """
    from pathlib import Path

    run_dir = Path(out_root) / run_id_for(theme, solver.seed)
    run_dir.mkdir(parents=True, exist_ok=True)

    try:
        storyboard = direct(theme, num_shots, client=director_client,
                            world_config=world_config)
        (run_dir / "storyboard.json").write_text(json.dumps({
            "theme": theme,
            "shots": [{"description": s.description,
                       "attributes": s.attributes.to_dict()}
                      for s in storyboard.shots],
        }, indent=2, sort_keys=True))
    except Exception as exc:
        raise PipelineStageError("director", str(exc)) from exc

    try:
        anchors = generate_anchors(model, storyboard, embedder, solver,
                                   memory_off=memory_off,
                                   independent_halves=independent_halves)
        adir = run_dir / "anchors"
        adir.mkdir(exist_ok=True)
        for i, pair in enumerate(anchors):
            (adir / f"{i}_start.png").write_bytes(frame_to_png_bytes(pair.start))
            (adir / f"{i}_end.png").write_bytes(frame_to_png_bytes(pair.end))
    except Exception as exc:
        raise PipelineStageError("anchors", str(exc)) from exc

    try:
        prompts = [refine(shot, pair, embedder, shot_index=i, client=refiner_client)
                   for i, (shot, pair) in enumerate(zip(storyboard.shots, anchors))]
        pdir = run_dir / "prompts"
        pdir.mkdir(exist_ok=True)
        for i, prompt in enumerate(prompts):
            (pdir / f"{i}.txt").write_text(prompt.text)
    except Exception as exc:
        raise PipelineStageError("refiner", str(exc)) from exc

    try:
        clips = []
        deviations = []
        for i, (shot, pair, prompt) in enumerate(
                zip(storyboard.shots, anchors, prompts)):
            length = clip_length or shot.attributes.shot_length
            clip = synthesize_clip(prompt, pair, length, model.codec,
                                   client=video_client)
            deviations.append(round(max(
                float(np.abs(clip[0] - pair.start).max()),
                float(np.abs(clip[-1] - pair.end).max())), 6))
            cdir = run_dir / "clips" / str(i)
            cdir.mkdir(parents=True, exist_ok=True)
            for k, frame in enumerate(clip):
                (cdir / f"frame_{k}.png").write_bytes(frame_to_png_bytes(frame))
            clips.append(clip)
    except Exception as exc:
        raise PipelineStageError("video", str(exc)) from exc

    boundaries = list(np.cumsum([len(c) for c in clips])[:-1].astype(int))
    provenance = {
        "theme": theme,
        "run_id": run_id_for(theme, solver.seed),
        "solver": {"num_steps": solver.num_steps, "scheme": solver.scheme,
                   "seed": solver.seed},
        "variant": {"memory_off": memory_off,
                    "independent_halves": independent_halves},
        "boundaries": [int(b) for b in boundaries],
        "clip_lengths": [len(c) for c in clips],
        "anchor_files": [
            {"shot": i, "start": f"anchors/{i}_start.png",
             "end": f"anchors/{i}_end.png"} for i in range(len(anchors))],
        "endpoint_deviation": deviations,
        "config": config_snapshot or {},
    }
    (run_dir / "provenance.json").write_text(
        json.dumps(provenance, indent=2, sort_keys=True))

    return MultiShotVideo(clips=clips, boundaries=[int(b) for b in boundaries],
                          anchors=anchors, provenance=provenance)


def load_run_dir(run_dir) -> tuple[Storyboard, MultiShotVideo]:
    """Read a persisted run back for evaluation."""
    from pathlib import Path

    run_dir = Path(run_dir)
    board = json.loads((run_dir / "storyboard.json").read_text())
    shots = parse_storyboard_shots(board["shots"])
    storyboard = Storyboard(shots=shots, theme=board.get("theme", ""))
    provenance = json.loads((run_dir / "provenance.json").read_text())
    clips = []
    for i in range(len(shots)):
        cdir = run_dir / "clips" / str(i)
        frames = []
        k = 0
        while (cdir / f"frame_{k}.png").exists():
            frames.append(png_bytes_to_frame((cdir / f"frame_{k}.png").read_bytes()))
            k += 1
        clips.append(frames)
    anchors = [
        FramePair(
            start=png_bytes_to_frame((run_dir / rec["start"]).read_bytes()),
            end=png_bytes_to_frame((run_dir / rec["end"]).read_bytes()))
        for rec in provenance["anchor_files"]]
    video = MultiShotVideo(clips=clips, boundaries=provenance["boundaries"],
                           anchors=anchors, provenance=provenance)
    return storyboard, video
