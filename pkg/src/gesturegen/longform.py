"""Long-sequence synthesis by composing predictions over overlapping windows.

A sequence longer than the model window is covered by overlapping segments.
At every reverse step each segment and each overlap region is denoised as
its own conditioned window, and the clean-latent estimates are merged by
inclusion-exclusion (segments add, overlaps subtract). One global posterior
step then advances the full-length state, so all window predictions at a
given step are independent and parallelizable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import (
    ConditioningBundle,
    DiffusionError,
    DiffusionModel,
    NoiseSchedule,
    make_cfg_predictor,
    reverse_chain,
)
from .injection import InjectionConfig, _blend
from .semantics import GestureDatabase, InjectionPlan, make_timeline_mask, plan_candidate_buffer
from .vqvae import LatentSequence


@dataclass(frozen=True)
class SegmentGraph:
    """Linear chain of windows: segments plus their consecutive overlaps."""

    segments: tuple[tuple[int, int], ...]
    overlaps: tuple[tuple[int, int], ...]
    total: int

    def __post_init__(self):
        if len(self.overlaps) != len(self.segments) - 1:
            raise DiffusionError("need exactly one overlap per consecutive segment pair")
        counts = np.zeros(self.total, dtype=int)
        for a, b in self.segments:
            counts[a:b] += 1
        for a, b in self.overlaps:
            if b <= a:
                raise DiffusionError("empty overlap region")
            counts[a:b] -= 1
        if not (counts == 1).all():
            raise DiffusionError("segments/overlaps do not partition the timeline")


def plan_segments(total: int, window: int, overlap: int) -> SegmentGraph:
    """Cover [0, total) with fixed-size windows at stride window - overlap.

    The last window is right-aligned so the tail is covered exactly.
    Overlap regions are the intersections of consecutive windows.
    """
    if not (window > overlap >= 1):
        raise DiffusionError(f"need window > overlap >= 1, got {window}, {overlap}")
    if total < window:
        raise DiffusionError(
            f"total {total} < window {window}; use plain sampling instead"
        )
    step = window - overlap
    starts = list(range(0, total - window + 1, step))
    if starts[-1] + window < total:
        starts.append(total - window)
    segments = tuple((s, s + window) for s in starts)
    overlaps = tuple(
        (starts[i + 1], starts[i] + window) for i in range(len(starts) - 1)
    )
    return SegmentGraph(segments, overlaps, total)


def merged_prediction(
    segment_predictions: list[np.ndarray],
    overlap_predictions: list[np.ndarray],
    graph: SegmentGraph,
) -> np.ndarray:
    """Combine window predictions into a full-length estimate.

    output[i] = sum of predictions of segments covering i minus sum of
    predictions of overlaps covering i. Indices covered by one segment only
    pass its prediction through unchanged.
    """
    if len(segment_predictions) != len(graph.segments):
        raise DiffusionError("one prediction per segment required")
    if len(overlap_predictions) != len(graph.overlaps):
        raise DiffusionError("one prediction per overlap required")
    first = np.asarray(segment_predictions[0])
    out = np.zeros((graph.total,) + first.shape[1:], dtype=first.dtype)
    for (a, b), pred in zip(graph.segments, segment_predictions):
        pred = np.asarray(pred)
        if pred.shape[0] != b - a:
            raise DiffusionError(f"segment [{a}, {b}) prediction has length {pred.shape[0]}")
        out[a:b] += pred
    for (a, b), pred in zip(graph.overlaps, overlap_predictions):
        pred = np.asarray(pred)
        if pred.shape[0] != b - a:
            raise DiffusionError(f"overlap [{a}, {b}) prediction has length {pred.shape[0]}")
        out[a:b] -= pred
    return out


def make_merged_predictor(
    model: DiffusionModel,
    cond: ConditioningBundle,
    graph: SegmentGraph,
    guidance_scale: float,
):
    """Window-sliced guidance predictor feeding the inclusion-exclusion merge."""
    seg_predict = [
        (span, make_cfg_predictor(model, cond.slice(*span), guidance_scale))
        for span in graph.segments
    ]
    ov_predict = [
        (span, make_cfg_predictor(model, cond.slice(*span), guidance_scale))
        for span in graph.overlaps
    ]

    def predict(x: torch.Tensor, t: int) -> torch.Tensor:
        out = torch.zeros_like(x)
        for (a, b), fn in seg_predict:
            out[:, a:b] += fn(x[:, a:b], t)
        for (a, b), fn in ov_predict:
            out[:, a:b] -= fn(x[:, a:b], t)
        return out

    return predict


def sample_long(
    model: DiffusionModel,
    cond: ConditioningBundle,
    total_latent_length: int,
    schedule: NoiseSchedule,
    window: int,
    overlap: int,
    seed: int = 0,
    guidance_scale: float = 2.5,
    clip_range: float | None = 4.0,
    plan: InjectionPlan | None = None,
    db: GestureDatabase | None = None,
    injection: InjectionConfig | None = None,
) -> LatentSequence:
    """One shared reverse chain over the full-length state.

    Per step, every window's estimate is computed independently and merged;
    a single global posterior step advances the state. Semantic injection,
    when a plan is supplied, applies to the merged global state. A request
    of exactly one window reduces bitwise to plain sampling with the seed.
    """
    if cond.length != total_latent_length:
        raise DiffusionError(
            f"conditioning covers {cond.length} latent frames, need {total_latent_length}"
        )
    if total_latent_length == window:
        graph = SegmentGraph(((0, window),), (), window)
    else:
        graph = plan_segments(total_latent_length, window, overlap)
    predict = make_merged_predictor(model, cond, graph, guidance_scale)

    hook = None
    if plan is not None and not plan.empty:
        if db is None or injection is None:
            raise DiffusionError("injection plan requires a database and config")
        injection.validate(schedule)
        mask = make_timeline_mask(plan, total_latent_length)
        buf = model.normalize(
            plan_candidate_buffer(
                plan, db, model.config.latent_dim, injection.sigma_perturb, seed
            )
        ).astype(np.float32)
        cand = torch.from_numpy(buf)[None]
        keep = torch.from_numpy(mask >= 0.5)[None, :, None]

        def hook(x, level, generator):
            if level < injection.k_steps:
                return x
            return _blend(x, cand, keep, level, schedule, injection, generator)

    out = reverse_chain(
        predict, total_latent_length, model.config.latent_dim, schedule, seed,
        clip_range=clip_range, step_hook=hook,
    )
    return LatentSequence(model.denormalize(out[0]))
