"""Consistency and transition metrics for multi-shot videos.

Subject/background consistency keep the consecutive-frame-similarity shape of
the usual video benchmarks but run on the deterministic embedder: a frame's
foreground is whatever differs enough from its border-median color, and each
kernel compares embeddings of the masked frame with the complement filled by
the frame mean. Cross-shot variants apply the same kernels across cut
boundaries. Transition similarity compares embedding-space transition vectors
against a paired reference, so it is only reported when a reference exists.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .pipeline import MultiShotVideo, Storyboard
from .world import Frame, FramePair

DEFAULT_FOREGROUND_THRESHOLD = 0.25


def foreground_mask(frame: Frame, threshold: float = DEFAULT_FOREGROUND_THRESHOLD)\
        -> np.ndarray:
    """True where a pixel's color is far from the border-median color."""
    f = np.asarray(frame, dtype=np.float64)
    border = np.concatenate([f[0], f[-1], f[1:-1, 0], f[1:-1, -1]])
    median = np.median(border, axis=0)
    dist = np.linalg.norm(f - median, axis=-1)
    return dist > threshold


def _masked_frame(frame: Frame, keep: np.ndarray) -> Frame:
    filled = np.asarray(frame, dtype=np.float64).copy()
    filled[~keep] = filled.mean(axis=(0, 1))
    return filled.astype(np.float32)


def _pair_kernel(a: Frame, b: Frame, embedder, foreground: bool,
                 threshold: float) -> float:
    keep_a = foreground_mask(a, threshold)
    keep_b = foreground_mask(b, threshold)
    if not foreground:
        keep_a, keep_b = ~keep_a, ~keep_b
    return embedder.cosine(embedder.embed_frame(_masked_frame(a, keep_a)),
                           embedder.embed_frame(_masked_frame(b, keep_b)))


def _clip_consistency(clip: list[Frame], embedder, foreground: bool,
                      threshold: float) -> float:
    if len(clip) < 2:
        raise ValueError("clip must contain at least 2 frames")
    sims = [_pair_kernel(clip[k], clip[k + 1], embedder, foreground, threshold)
            for k in range(len(clip) - 1)]
    return float(np.mean(sims))


def subject_consistency(clip: list[Frame], embedder,
                        threshold: float = DEFAULT_FOREGROUND_THRESHOLD) -> float:
    """Mean consecutive-frame similarity of foreground-masked frames."""
    return _clip_consistency(clip, embedder, foreground=True, threshold=threshold)


def background_consistency(clip: list[Frame], embedder,
                           threshold: float = DEFAULT_FOREGROUND_THRESHOLD) -> float:
    """Same scheme with the complementary mask."""
    return _clip_consistency(clip, embedder, foreground=False, threshold=threshold)


def _boundary_items(video: MultiShotVideo, embedder, foreground: bool,
                    threshold: float) -> list[float]:
    items = []
    for i in range(len(video.clips) - 1):
        items.append(_pair_kernel(video.clips[i][-1], video.clips[i + 1][0],
                                  embedder, foreground, threshold))
    return items


def cross_shot_consistency(video: MultiShotVideo, embedder,
                           threshold: float = DEFAULT_FOREGROUND_THRESHOLD)\
        -> tuple[float, float]:
    """Apply the subject/background kernels across each cut boundary."""
    if len(video.clips) < 2:
        raise ValueError("cross-shot consistency needs at least 2 shots")
    sc_e = _boundary_items(video, embedder, True, threshold)
    bc_e = _boundary_items(video, embedder, False, threshold)
    return float(np.mean(sc_e)), float(np.mean(bc_e))


def _transition_cosines(generated: list[FramePair], reference: list[FramePair],
                        embedder) -> list[float]:
    values = []
    for i in range(len(generated) - 1):
        g = (embedder.embed_frame(generated[i + 1].start).astype(np.float64)
             - embedder.embed_frame(generated[i].end).astype(np.float64))
        r = (embedder.embed_frame(reference[i + 1].start).astype(np.float64)
             - embedder.embed_frame(reference[i].end).astype(np.float64))
        ng, nr = np.linalg.norm(g), np.linalg.norm(r)
        if ng < 1e-12 and nr < 1e-12:
            values.append(1.0)
        elif ng < 1e-12 or nr < 1e-12:
            values.append(0.0)
        else:
            values.append(float(np.clip(np.dot(g, r) / (ng * nr), -1.0, 1.0)))
    return values


def tvs(generated: list[FramePair], reference: list[FramePair], embedder) -> float:
    """Mean cosine between generated and reference transition vectors.

    The transition vector at boundary i is the embedding of shot i+1's start
    frame minus the embedding of shot i's end frame. The reference-paired
    definition is this artifact's own; values are not comparable to any
    published table.
    """
    if len(generated) != len(reference):
        raise ValueError("generated and reference pair lists differ in length")
    if len(generated) < 2:
        raise ValueError("transition similarity needs at least 2 shots")
    return float(np.mean(_transition_cosines(generated, reference, embedder)))


@dataclass
class MetricsReport:
    sc: float | None = None
    bc: float | None = None
    sc_e: float | None = None
    bc_e: float | None = None
    tvs: float | None = None
    items: dict = field(default_factory=dict)
    absent: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"sc": self.sc, "bc": self.bc, "sc_e": self.sc_e,
                "bc_e": self.bc_e, "tvs": self.tvs, "items": self.items,
                "absent": self.absent}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report(video: MultiShotVideo, storyboard: Storyboard | None, reference,
           embedder, threshold: float = DEFAULT_FOREGROUND_THRESHOLD)\
        -> MetricsReport:
    """Compute all applicable metrics; missing ones carry an explicit reason.

    reference may be a story instance, a list of ground-truth frame pairs,
    or None (then the transition metric is absent).
    """
    if not video.clips or any(len(c) == 0 for c in video.clips):
        raise ValueError("video has no frames to evaluate")
    rep = MetricsReport()
    rep.items["sc"] = [subject_consistency(c, embedder, threshold)
                       for c in video.clips]
    rep.items["bc"] = [background_consistency(c, embedder, threshold)
                       for c in video.clips]
    rep.sc = float(np.mean(rep.items["sc"]))
    rep.bc = float(np.mean(rep.items["bc"]))

    if len(video.clips) >= 2:
        rep.items["sc_e"] = _boundary_items(video, embedder, True, threshold)
        rep.items["bc_e"] = _boundary_items(video, embedder, False, threshold)
        rep.sc_e = float(np.mean(rep.items["sc_e"]))
        rep.bc_e = float(np.mean(rep.items["bc_e"]))
    else:
        rep.absent["sc_e"] = "needs at least 2 shots"
        rep.absent["bc_e"] = "needs at least 2 shots"

    ref_pairs = getattr(reference, "pairs", reference)
    if ref_pairs is None:
        rep.absent["tvs"] = "no reference pairs provided"
    elif len(video.anchors) < 2:
        rep.absent["tvs"] = "needs at least 2 shots"
    else:
        if len(ref_pairs) != len(video.anchors):
            raise ValueError("reference pair count does not match the video")
        rep.items["tvs"] = _transition_cosines(video.anchors, list(ref_pairs),
                                               embedder)
        rep.tvs = float(np.mean(rep.items["tvs"]))
    return rep
