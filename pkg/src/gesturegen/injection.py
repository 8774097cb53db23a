"""Reverse-diffusion sampling with timeline-masked gesture injection.

During the early reverse steps (noise level >= K) the masked latent regions
are overwritten with candidate gesture embeddings; the remaining steps run
plain denoising so the model can blend seams and preserve smoothness. With
an empty plan the sampler is the plain one, bit for bit.
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
    sample,
)
from .semantics import GestureDatabase, InjectionPlan, make_timeline_mask, plan_candidate_buffer
from .vqvae import LatentSequence


@dataclass
class InjectionConfig:
    """Controls of the injection phase.

    k_steps: reverse step threshold K; injection applies at noise levels
        >= K, refinement below. Must lie in [1, T].
    sigma_perturb: std of the once-per-run candidate perturbation, in raw
        latent units.
    noise_matching: forward-noise candidates to the current level before
        blending (default); off blends the clean embedding (literal mode).
    """

    k_steps: int
    sigma_perturb: float = 0.0
    noise_matching: bool = True

    def validate(self, schedule: NoiseSchedule) -> None:
        if not 1 <= self.k_steps <= schedule.steps:
            raise DiffusionError(
                f"K={self.k_steps} outside [1, {schedule.steps}]"
            )


def choose_K(schedule: NoiseSchedule, fraction: float) -> int:
    """K = round(fraction * T), clamped into [1, T]."""
    if not 0.0 < fraction <= 1.0:
        raise DiffusionError(f"fraction must be in (0, 1], got {fraction}")
    return min(max(int(round(fraction * schedule.steps)), 1), schedule.steps)


def default_sigma(model: DiffusionModel, relative: float = 0.05) -> float:
    """Perturbation std as a fraction of the mean per-dimension latent std."""
    return relative * float(np.mean(model.latent_std))


def inject(
    x_t: np.ndarray,
    t: int,
    mask: np.ndarray,
    candidates_latent: np.ndarray,
    schedule: NoiseSchedule,
    config: InjectionConfig,
    generator: torch.Generator | None = None,
) -> np.ndarray:
    """Blend candidates into the state: keep x_t where mask is 1, inject where 0.

    With noise matching the candidate is forward-noised to level t first
    (requires a generator); kept indices are returned exactly unchanged.
    """
    x_t = np.asarray(x_t, dtype=np.float32)
    candidates_latent = np.asarray(candidates_latent, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    if candidates_latent.shape != x_t.shape:
        raise DiffusionError(
            f"candidate shape {candidates_latent.shape} != state shape {x_t.shape}"
        )
    if mask.shape[0] != x_t.shape[0]:
        raise DiffusionError(f"mask length {mask.shape[0]} != state length {x_t.shape[0]}")
    if t < config.k_steps:
        raise DiffusionError(f"injection at t={t} below threshold K={config.k_steps}")
    x = torch.from_numpy(x_t)[None]
    cand = torch.from_numpy(candidates_latent)[None]
    keep = torch.from_numpy(mask >= 0.5)[None, :, None]
    out = _blend(x, cand, keep, t, schedule, config, generator)
    return out[0].numpy()


def _blend(x, cand, keep, level, schedule, config, generator) -> torch.Tensor:
    if config.noise_matching:
        if generator is None:
            raise DiffusionError("noise matching requires a generator")
        ab = schedule.alpha_bar(level)
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        cand = np.sqrt(ab) * cand + np.sqrt(1.0 - ab) * noise
    return torch.where(keep, x, cand)


def sample_with_injection(
    model: DiffusionModel,
    cond: ConditioningBundle,
    plan: InjectionPlan,
    db: GestureDatabase,
    schedule: NoiseSchedule,
    config: InjectionConfig,
    seed: int = 0,
    guidance_scale: float = 2.5,
    clip_range: float | None = 4.0,
) -> LatentSequence:
    """Sample with the plan's spans injected from step T down to K.

    An empty plan short-circuits to plain sampling with the same seed
    (bitwise identical output). Candidate embeddings are perturbed once,
    normalized into model space, and blended after each early denoise step.
    """
    config.validate(schedule)
    if plan.empty:
        return sample(
            model, cond, plan.latent_length, schedule, guidance_scale, seed,
            clip_range=clip_range,
        )
    out = _injection_chain(
        model, cond, plan, db, schedule, config, seed, guidance_scale, clip_range, batch=1
    )
    return LatentSequence(out[0])


def sample_with_injection_batch(
    model: DiffusionModel,
    cond: ConditioningBundle,
    plan: InjectionPlan,
    db: GestureDatabase,
    schedule: NoiseSchedule,
    config: InjectionConfig,
    n: int,
    seed: int = 0,
    guidance_scale: float = 2.5,
    clip_range: float | None = 4.0,
) -> np.ndarray:
    """n injected runs as one batched chain, per-run candidate perturbations."""
    config.validate(schedule)
    return _injection_chain(
        model, cond, plan, db, schedule, config, seed, guidance_scale, clip_range, batch=n
    )


def _injection_chain(
    model, cond, plan, db, schedule, config, seed, guidance_scale, clip_range, batch
) -> np.ndarray:
    mask = make_timeline_mask(plan, plan.latent_length)
    buffers = [
        model.normalize(
            plan_candidate_buffer(
                plan, db, model.config.latent_dim, config.sigma_perturb, seed + 7919 * b
            )
        ).astype(np.float32)
        for b in range(batch)
    ]
    cand = torch.from_numpy(np.stack(buffers))
    keep = torch.from_numpy(mask >= 0.5)[None, :, None]

    def hook(x: torch.Tensor, level: int, generator: torch.Generator) -> torch.Tensor:
        if level < config.k_steps:
            return x
        return _blend(x, cand, keep, level, schedule, config, generator)

    predict = make_cfg_predictor(model, cond, guidance_scale)
    out = reverse_chain(
        predict, plan.latent_length, model.config.latent_dim, schedule, seed,
        batch=batch, clip_range=clip_range, step_hook=hook,
    )
    return model.denormalize(out)
