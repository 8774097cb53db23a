"""Glue between corpus, autoencoder, diffusion, and samplers.

These helpers keep the CLI thin and give tests a single place to run the
sampling path: conditioning construction, transcript-to-plan resolution,
window routing (plain vs long-sequence), and latent decoding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import ConditioningBundle, DiffusionModel, NoiseSchedule
from .injection import InjectionConfig, choose_K, default_sigma, sample_with_injection
from .longform import sample_long
from .metrics import BeatTrack
from .motion import MotionClip
from .semantics import (
    GestureDatabase,
    InjectionPlan,
    LlmClient,
    TranscriptWord,
    assign_gestures,
    build_plan,
    make_timeline_mask,
)
from .synthesis import SyntheticCorpus, rhythm_features
from .vqvae import LatentSequence, VqvaeModel, decode, encode


def corpus_conditioning(features: np.ndarray, speaker_id: int) -> ConditioningBundle:
    return ConditioningBundle(features, speaker_id)


def corpus_to_diffusion_dataset(
    corpus: SyntheticCorpus, vqvae: VqvaeModel
) -> list[tuple[np.ndarray, ConditioningBundle]]:
    """Encode every corpus clip and pair it with its conditioning."""
    out = []
    for item in corpus.clips:
        z = encode(vqvae, item.clip)
        out.append((z.values, corpus_conditioning(item.features, item.speaker_id)))
    return out


def parameter_hash(net: torch.nn.Module) -> str:
    """Stable digest of all parameters, for checkpoint-continuity checks."""
    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


@dataclass
class SampleRequest:
    duration_seconds: float
    bpm: float = 110.0
    speaker_id: int = 0
    seed: int = 0
    guidance_scale: float = 2.5
    window: int = 90
    overlap: int = 30
    k_fraction: float = 0.25
    sigma_perturb: float | None = None
    noise_matching: bool = True
    transcript: list[TranscriptWord] | None = None
    plan: InjectionPlan | None = None  # pre-resolved plan, skips assignment
    feature_dim: int = 16
    speaker_count: int = 4
    fps: float = 30.0


@dataclass
class SampleResult:
    motion: MotionClip
    latents: LatentSequence
    plan: InjectionPlan
    mask: np.ndarray
    audio_beats: BeatTrack
    used_long_path: bool


def resolve_plan(
    request: SampleRequest,
    db: GestureDatabase | None,
    latent_length: int,
    latent_fps: float,
    client: LlmClient | None = None,
) -> InjectionPlan:
    """Transcript + database -> injection plan; empty without a transcript."""
    if request.transcript is None or db is None:
        return InjectionPlan((), latent_length)
    assignments = assign_gestures(request.transcript, db, client)
    return build_plan(request.transcript, assignments, db, latent_length, latent_fps)


def run_sampling(
    vqvae: VqvaeModel,
    model: DiffusionModel,
    schedule: NoiseSchedule,
    request: SampleRequest,
    db: GestureDatabase | None = None,
    client: LlmClient | None = None,
) -> SampleResult:
    """End-to-end single sample: conditioning, plan, chain routing, decode.

    Durations beyond the model window are routed through the long-sequence
    sampler; anything else through the injection sampler (which reduces to
    plain sampling when the plan is empty).
    """
    down = vqvae.downsample
    n_frames = int(round(request.duration_seconds * request.fps))
    latent_length = int(np.ceil(n_frames / down))
    descriptor = {
        "duration_seconds": request.duration_seconds,
        "bpm": request.bpm,
        "speaker_id": request.speaker_id,
        "speaker_count": request.speaker_count,
        "fps": request.fps,
        "downsample": down,
    }
    cond = ConditioningBundle(
        rhythm_features(descriptor, request.feature_dim), request.speaker_id
    )
    latent_fps = request.fps / down
    if request.plan is not None:
        plan = request.plan
    else:
        plan = resolve_plan(request, db, latent_length, latent_fps, client)
    mask = make_timeline_mask(plan, latent_length)
    sigma = request.sigma_perturb
    if sigma is None:
        sigma = default_sigma(model)
    inj = InjectionConfig(
        k_steps=choose_K(schedule, request.k_fraction),
        sigma_perturb=sigma,
        noise_matching=request.noise_matching,
    )
    use_long = latent_length > request.window
    if use_long:
        latents = sample_long(
            model, cond, latent_length, schedule,
            window=request.window, overlap=request.overlap,
            seed=request.seed, guidance_scale=request.guidance_scale,
            plan=plan, db=db, injection=inj,
        )
    else:
        latents = sample_with_injection(
            model, cond, plan, db if db is not None else GestureDatabase([]),
            schedule, inj, seed=request.seed, guidance_scale=request.guidance_scale,
        )
    motion = decode(vqvae, latents)
    period = 60.0 / request.bpm
    beats = BeatTrack(np.arange(period, request.duration_seconds - 1e-9, period))
    return SampleResult(motion, latents, plan, mask, beats, use_long)
