"""Procedural shot-world: scenes, camera paths, rendered clips, and datasets.

A story is a single scene (colored shapes on a textured background) filmed by
an ordered list of shots. Each shot carries a templated text description,
categorical cinematic attributes, and a start/end camera pose; rendering a shot
yields a clip whose first and last frames form the ground-truth anchor pair.
Everything is a pure function of integer seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import NotEnoughInternalFramesError
from .seeding import make_rng

Frame = np.ndarray  # float32, (H, W, 3), values in [0, 1]

SHAPES = ("circle", "square", "triangle")
SHOT_SCALES = ("close-up", "medium", "wide")
CAMERA_ANGLES = ("level", "high", "low")
CAMERA_MOVEMENTS = ("static", "pan-left", "pan-right", "zoom-in", "zoom-out")

# Saturated, named colors for entities. Names feed the description grammar.
ENTITY_PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.15, 0.75),
    "cyan": (0.10, 0.80, 0.85),
    "pink": (0.95, 0.55, 0.75),
}

# Muted backgrounds with names disjoint from the entity vocabulary, so text
# embeddings can separate "what is shown" from "where it happens".
BACKGROUND_PALETTE = {
    "charcoal": (0.16, 0.16, 0.18),
    "ivory": (0.88, 0.87, 0.80),
    "navy": (0.10, 0.12, 0.35),
    "olive": (0.35, 0.38, 0.16),
    "maroon": (0.40, 0.12, 0.16),
    "teal": (0.10, 0.42, 0.42),
    "sand": (0.80, 0.70, 0.50),
    "slate": (0.42, 0.46, 0.52),
}

MOVEMENT_PHRASES = {
    "static": "holds still",
    "pan-left": "pans left",
    "pan-right": "pans right",
    "zoom-in": "zooms in",
    "zoom-out": "zooms out",
}

# Zoom bands realizing each shot scale (zoom >= 1 keeps the window inside the scene).
_SCALE_ZOOM = {"wide": (1.0, 1.25), "medium": (1.45, 1.85), "close-up": (2.3, 3.2)}


@dataclass(frozen=True)
class EntitySpec:
    id: int
    shape: str
    color_name: str
    color: tuple[float, float, float]
    size: float  # diameter as fraction of scene extent, in (0, 0.5]
    position: tuple[float, float]  # world coordinates in [0, 1]^2

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not 0.0 < self.size <= 0.5:
            raise ValueError(f"entity size {self.size} outside (0, 0.5]")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError("entity color components must lie in [0, 1]")


@dataclass(frozen=True)
class SceneSpec:
    background_name: str
    background_color: tuple[float, float, float]
    texture_seed: int
    entities: tuple[EntitySpec, ...]

    def __post_init__(self):
        if not self.entities:
            raise ValueError("scene needs at least one entity")
        ids = [e.id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise ValueError("entity ids must be unique within a scene")
        for e in self.entities:
            if not (0.0 <= e.position[0] <= 1.0 and 0.0 <= e.position[1] <= 1.0):
                raise ValueError(f"entity {e.id} position outside the unit square")


@dataclass(frozen=True)
class CameraPose:
    center: tuple[float, float]
    zoom: float  # in [0.25, 4]; half-window = 0.5 / zoom


@dataclass(frozen=True)
class ShotAttributes:
    shot_scale: str
    shot_length: int
    camera_angle: str
    camera_movement: str

    def __post_init__(self):
        if self.shot_scale not in SHOT_SCALES:
            raise ValueError(f"unknown shot scale {self.shot_scale!r}")
        if self.camera_angle not in CAMERA_ANGLES:
            raise ValueError(f"unknown camera angle {self.camera_angle!r}")
        if self.camera_movement not in CAMERA_MOVEMENTS:
            raise ValueError(f"unknown camera movement {self.camera_movement!r}")
        if self.shot_length < 3:
            raise ValueError("shot_length must be >= 3 so internal frames exist")

    def to_dict(self) -> dict:
        return {
            "shot_scale": self.shot_scale,
            "shot_length": self.shot_length,
            "camera_angle": self.camera_angle,
            "camera_movement": self.camera_movement,
        }


@dataclass(frozen=True)
class ShotSpec:
    description: str
    attributes: ShotAttributes
    start_pose: CameraPose
    end_pose: CameraPose

    def __post_init__(self):
        mv = self.attributes.camera_movement
        s, e = self.start_pose, self.end_pose
        ok = {
            "static": s == e,
            "pan-left": e.center[0] < s.center[0],
            "pan-right": e.center[0] > s.center[0],
            "zoom-in": e.zoom > s.zoom,
            "zoom-out": e.zoom < s.zoom,
        }[mv]
        if not ok:
            raise ValueError(f"poses inconsistent with camera movement {mv!r}")


@dataclass(frozen=True)
class FramePair:
    start: Frame
    end: Frame


@dataclass
class StoryInstance:
    storyboard: list[ShotSpec]
    scene: SceneSpec
    clips: list[list[Frame]]
    pairs: list[FramePair]
    seed: int


@dataclass(frozen=True)
class WorldConfig:
    frame_size: int = 64
    min_entities: int = 3
    max_entities: int = 6
    min_shot_length: int = 5
    max_shot_length: int = 9
    texture_amplitude: float = 0.04


def describe_shot(scale: str, color_name: str, shape: str, background_name: str,
                  movement: str, angle: str) -> str:
    """Render the fixed description grammar for one shot."""
    return (f"a {scale} shot of a {color_name} {shape} in a {background_name} scene, "
            f"the camera {MOVEMENT_PHRASES[movement]}, {angle} angle")


def _clamp_center(c: float, half: float) -> float:
    # Window wider than the scene: pin to the middle.
    if half >= 0.5:
        return 0.5
    return min(max(c, half), 1.0 - half)


def _background(scene: SceneSpec, xs: np.ndarray, ys: np.ndarray,
                amplitude: float) -> np.ndarray:
    rng = np.random.default_rng(scene.texture_seed)
    freq = rng.uniform(0.5, 2.0, size=2)
    phase = rng.uniform(0.0, 1.0, size=3)
    base = np.asarray(scene.background_color, dtype=np.float64)
    wave = np.sin(2.0 * np.pi * (freq[0] * xs + freq[1] * ys)[..., None]
                  + 2.0 * np.pi * phase)
    return base + amplitude * wave


def render_frame(scene: SceneSpec, pose: CameraPose,
                 config: WorldConfig = WorldConfig()) -> Frame:
    """Rasterize the visible window of a scene deterministically.

    The window is center +/- 0.5/zoom, clamped so it stays inside the unit
    square (or centered, if zoomed out beyond it). Entities paint over the
    textured background largest-first, so smaller ones end up on top.
    """
    n = config.frame_size
    zoom = min(max(pose.zoom, 0.25), 4.0)
    half = 0.5 / zoom
    cx = _clamp_center(pose.center[0], half)
    cy = _clamp_center(pose.center[1], half)

    px = cx - half + (np.arange(n) + 0.5) * (2.0 * half / n)
    py = cy - half + (np.arange(n) + 0.5) * (2.0 * half / n)
    xs, ys = np.meshgrid(px, py)  # ys varies along rows (top row = smallest y)

    img = _background(scene, xs, ys, config.texture_amplitude)

    for ent in sorted(scene.entities, key=lambda e: (-e.size, e.id)):
        ex, ey = ent.position
        r = ent.size / 2.0
        if ent.shape == "circle":
            mask = (xs - ex) ** 2 + (ys - ey) ** 2 <= r * r
        elif ent.shape == "square":
            mask = np.maximum(np.abs(xs - ex), np.abs(ys - ey)) <= r
        else:  # triangle, apex toward smaller y
            ax, ay = ex, ey - r
            bx, by = ex - r, ey + r
            cx2, cy2 = ex + r, ey + r
            d1 = (xs - bx) * (ay - by) - (ax - bx) * (ys - by)
            d2 = (xs - cx2) * (by - cy2) - (bx - cx2) * (ys - cy2)
            d3 = (xs - ax) * (cy2 - ay) - (cx2 - ax) * (ys - ay)
            neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
            pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
            mask = ~(neg & pos)
        img[mask] = ent.color

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_clip(scene: SceneSpec, shot: ShotSpec,
                config: WorldConfig = WorldConfig()) -> list[Frame]:
    """Render shot_length frames along a linear camera path."""
    length = shot.attributes.shot_length
    if length < 3:
        raise ValueError("shot_length must be >= 3")
    s, e = shot.start_pose, shot.end_pose
    frames = []
    for k in range(length):
        t = k / (length - 1)
        pose = CameraPose(
            center=((1.0 - t) * s.center[0] + t * e.center[0],
                    (1.0 - t) * s.center[1] + t * e.center[1]),
            zoom=(1.0 - t) * s.zoom + t * e.zoom,
        )
        frames.append(render_frame(scene, pose, config))
    return frames


def extract_pair(clip: list[Frame]) -> FramePair:
    """Ground-truth anchor pair: the first and last frames of a clip."""
    if len(clip) < 2:
        raise ValueError("clip must contain at least 2 frames")
    return FramePair(start=clip[0], end=clip[-1])


def sample_internal_negative(clip: list[Frame], seed: int) -> FramePair:
    """Draw two distinct internal frames, uniformly, preserving temporal order.

    Internal means strictly between the clip endpoints, so the result is a
    plausible-but-mismatched pair (an incomplete camera movement) usable as a
    preference-tuple negative.
    """
    if len(clip) < 4:
        raise NotEnoughInternalFramesError(
            f"clip of length {len(clip)} has fewer than 2 internal frames")
    rng = make_rng(seed)
    idx = rng.choice(np.arange(1, len(clip) - 1), size=2, replace=False)
    a, b = int(min(idx)), int(max(idx))
    return FramePair(start=clip[a], end=clip[b])


def _sample_scene(rng: np.random.Generator, config: WorldConfig) -> SceneSpec:
    count = int(rng.integers(config.min_entities, config.max_entities + 1))
    combos = [(c, s) for c in ENTITY_PALETTE for s in SHAPES]
    picks = rng.choice(len(combos), size=count, replace=False)
    entities = []
    for i, k in enumerate(picks):
        color_name, shape = combos[int(k)]
        entities.append(EntitySpec(
            id=i,
            shape=shape,
            color_name=color_name,
            color=ENTITY_PALETTE[color_name],
            size=float(rng.uniform(0.12, 0.30)),
            position=(float(rng.uniform(0.18, 0.82)), float(rng.uniform(0.18, 0.82))),
        ))
    bg = list(BACKGROUND_PALETTE)[int(rng.integers(len(BACKGROUND_PALETTE)))]
    return SceneSpec(
        background_name=bg,
        background_color=BACKGROUND_PALETTE[bg],
        texture_seed=int(rng.integers(2 ** 31)),
        entities=tuple(entities),
    )


def _sample_poses(rng: np.random.Generator, focus: EntitySpec, scale: str,
                  movement: str) -> tuple[CameraPose, CameraPose]:
    z0 = float(rng.uniform(*_SCALE_ZOOM[scale]))
    fx, fy = focus.position
    if movement == "static":
        h = 0.5 / z0
        c = (_clamp_center(fx, h), _clamp_center(fy, h))
        return CameraPose(c, z0), CameraPose(c, z0)
    if movement == "zoom-in":
        z1 = min(z0 * float(rng.uniform(1.35, 1.7)), 4.0)
        h = 0.5 / max(z0, 1e-9)  # start zoom is the wider window
        c = (_clamp_center(fx, h), _clamp_center(fy, h))
        return CameraPose(c, z0), CameraPose(c, z1)
    if movement == "zoom-out":
        z1 = max(z0 / float(rng.uniform(1.35, 1.7)), 1.0)
        h = 0.5 / z1  # end zoom is the wider window
        c = (_clamp_center(fx, h), _clamp_center(fy, h))
        return CameraPose(c, z0), CameraPose(c, z1)
    # pans keep zoom fixed and slide the center horizontally
    h = 0.5 / z0
    max_delta = 1.0 - 2.0 * h
    delta = float(rng.uniform(0.15, max(0.151, min(0.3, max_delta))))
    delta = min(delta, max_delta)
    y = _clamp_center(fy, h)
    if movement == "pan-left":
        x0 = min(max(fx, h + delta), 1.0 - h)
        return CameraPose((x0, y), z0), CameraPose((x0 - delta, y), z0)
    x0 = min(max(fx, h), 1.0 - h - delta)
    return CameraPose((x0, y), z0), CameraPose((x0 + delta, y), z0)


def sample_storyboard(rng: np.random.Generator, scene: SceneSpec, num_shots: int,
                      config: WorldConfig) -> list[ShotSpec]:
    """Sample shot specs under simple cinematic rules.

    Consecutive shots alternate scale, at most two consecutive shots hold
    still, and wide shots only hold or zoom in (no room to pan at full view).
    """
    shots = []
    prev_scale = None
    static_run = 0
    for _ in range(num_shots):
        scales = [s for s in SHOT_SCALES if s != prev_scale]
        scale = scales[int(rng.integers(len(scales)))]
        moves = ["static", "zoom-in"] if scale == "wide" else list(CAMERA_MOVEMENTS)
        if static_run >= 2 and "static" in moves:
            moves.remove("static")
        movement = moves[int(rng.integers(len(moves)))]
        static_run = static_run + 1 if movement == "static" else 0
        prev_scale = scale

        angle = CAMERA_ANGLES[int(rng.integers(len(CAMERA_ANGLES)))]
        length = int(rng.integers(config.min_shot_length, config.max_shot_length + 1))
        focus = scene.entities[int(rng.integers(len(scene.entities)))]
        start, end = _sample_poses(rng, focus, scale, movement)
        shots.append(ShotSpec(
            description=describe_shot(scale, focus.color_name, focus.shape,
                                      scene.background_name, movement, angle),
            attributes=ShotAttributes(scale, length, angle, movement),
            start_pose=start,
            end_pose=end,
        ))
    return shots


def generate_story(seed: int, num_shots: int,
                   config: WorldConfig = WorldConfig()) -> StoryInstance:
    """Generate a full story: one scene, num_shots shots, rendered clips, pairs."""
    if num_shots < 1:
        raise ValueError("num_shots must be >= 1")
    scene = _sample_scene(make_rng(seed, 1), config)
    storyboard = sample_storyboard(make_rng(seed, 2), scene,
                                   num_shots, config)
    clips = [render_clip(scene, shot, config) for shot in storyboard]
    pairs = [extract_pair(clip) for clip in clips]
    return StoryInstance(storyboard=storyboard, scene=scene, clips=clips,
                         pairs=pairs, seed=seed)


@dataclass(frozen=True)
class ExportConfig:
    out_dir: str
    seed: int = 0
    train_stories: int = 512
    test_stories: int = 64
    min_shots: int = 2
    max_shots: int = 8
    world: WorldConfig = field(default_factory=WorldConfig)


def frame_to_png_bytes(frame: Frame) -> bytes:
    """Encode a frame as 8-bit RGB PNG bytes."""
    import io
    arr = np.clip(np.round(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255)
    img = Image.fromarray(arr.astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_frame(data: bytes) -> Frame:
    import io
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def story_to_json(story: StoryInstance) -> dict:
    return {
        "seed": story.seed,
        "shots": [
            {"description": s.description, "attributes": s.attributes.to_dict()}
            for s in story.storyboard
        ],
    }


def _write_story(root: Path, story_id: str, story: StoryInstance) -> None:
    sdir = root / "stories" / story_id
    sdir.mkdir(parents=True, exist_ok=True)
    (sdir / "story.json").write_text(json.dumps(story_to_json(story), indent=2,
                                                sort_keys=True))
    for i, clip in enumerate(story.clips):
        cdir = sdir / "shots" / str(i)
        cdir.mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(clip):
            (cdir / f"frame_{k}.png").write_bytes(frame_to_png_bytes(frame))


def _story_seed(base_seed: int, index: int, split: str) -> int:
    # Parity split keeps train and test seed sets provably disjoint.
    return 2 * (base_seed + index) + (1 if split == "test" else 0)


def export_dataset(config: ExportConfig) -> Path:
    """Write a dataset directory: manifest, per-story JSON, per-frame PNGs."""
    root = Path(config.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"splits": {}, "config": {
        "seed": config.seed,
        "train_stories": config.train_stories,
        "test_stories": config.test_stories,
        "min_shots": config.min_shots,
        "max_shots": config.max_shots,
        "frame_size": config.world.frame_size,
    }}
    for split, count in (("train", config.train_stories), ("test", config.test_stories)):
        seeds = []
        for i in range(count):
            seed = _story_seed(config.seed, i, split)
            rng = make_rng(seed, 3)
            num_shots = int(rng.integers(config.min_shots, config.max_shots + 1))
            story = generate_story(seed, num_shots, config.world)
            _write_story(root, f"{split}_{i:04d}", story)
            seeds.append(seed)
        manifest["splits"][split] = {"count": count, "seeds": seeds}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_story_dir(story_dir: str | Path) -> tuple[list[dict], list[list[Frame]]]:
    """Read one exported story back: (shot records, clips)."""
    sdir = Path(story_dir)
    meta = json.loads((sdir / "story.json").read_text())
    clips = []
    for i in range(len(meta["shots"])):
        cdir = sdir / "shots" / str(i)
        frames = []
        k = 0
        while (cdir / f"frame_{k}.png").exists():
            frames.append(png_bytes_to_frame((cdir / f"frame_{k}.png").read_bytes()))
            k += 1
        clips.append(frames)
    return meta["shots"], clips
