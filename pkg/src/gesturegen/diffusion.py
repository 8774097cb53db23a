"""Conditional latent diffusion over motion latent sequences.

Forward noising, an attention-based denoiser that predicts the clean latent
x0 directly, the conditional/unconditional training objective, and ancestral
sampling. Conditioning is per-latent-frame audio features (cross-attended)
plus a speaker identity (added to the timestep embedding); classifier-free
guidance combines the conditional and null predictions at sampling time.

All sampling entry points share one reverse-chain implementation so that
specialized samplers (mask injection, windowed long-sequence merging) reduce
bitwise to plain sampling in their degenerate configurations.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .vqvae import LatentSequence, TrainingDiverged

CHECKPOINT_VERSION = 1


class DiffusionError(ValueError):
    """Raised for schedule misuse, shape mismatches, or bad conditioning."""


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule for T noising steps (t = 1..T).

    alpha_bars[t-1] is the running product of (1 - beta) up to step t;
    alpha_bar(0) is defined as 1.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise DiffusionError(f"step {t} outside schedule range 1..{self.steps}")


def make_linear_schedule(
    steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linear beta ramp from beta_start to beta_end over `steps` steps."""
    if steps < 1:
        raise DiffusionError("schedule needs at least one step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DiffusionError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if steps == 1:
        betas = np.array([beta_start])
    else:
        betas = beta_start + np.arange(steps) / (steps - 1) * (beta_end - beta_start)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward-noise x0 to level t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise DiffusionError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def _q_sample_t(x0: torch.Tensor, ab: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditioningBundle:
    """Audio features aligned to the latent timeline plus a speaker id.

    `null_flag` marks the unconditional pass: the denoiser then ignores the
    audio content and speaker entirely (learned null embeddings instead).
    """

    audio_features: np.ndarray
    speaker_id: int = 0
    null_flag: bool = False

    def __post_init__(self):
        audio = np.asarray(self.audio_features, dtype=np.float32)
        object.__setattr__(self, "audio_features", audio)
        if audio.ndim != 2:
            raise DiffusionError(f"audio features must be (Lz, F), got {audio.shape}")

    @property
    def length(self) -> int:
        return self.audio_features.shape[0]

    def slice(self, start: int, end: int) -> "ConditioningBundle":
        return ConditioningBundle(self.audio_features[start:end], self.speaker_id, self.null_flag)

    def as_null(self) -> "ConditioningBundle":
        return ConditioningBundle(self.audio_features, self.speaker_id, True)


# ---------------------------------------------------------------------------
# Denoiser network
# ---------------------------------------------------------------------------


@dataclass
class DenoiserConfig:
    latent_dim: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    audio_dim: int = 16
    speaker_count: int = 4
    time_layers: int = 2  # depth of the timestep-embedding MLP


def _sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """(N,) positions -> (N, dim) sin/cos embedding."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = positions.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


class _Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True)
        self.norm3 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, cfg.ff_dim), nn.GELU(), nn.Linear(cfg.ff_dim, d))

    def forward(self, h: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        a = self.norm1(h)
        h = h + self.self_attn(a, a, a, need_weights=False)[0]
        b = self.norm2(h)
        h = h + self.cross_attn(b, memory, memory, need_weights=False)[0]
        return h + self.ff(self.norm3(h))


class Denoiser(nn.Module):
    """Sequence-to-sequence x0 predictor.

    forward(x, t, audio, speaker, null_mask):
        x: (B, L, D) noisy latents; t: (B,) int steps;
        audio: (B, L, F); speaker: (B,) ids; null_mask: (B,) bool.
    Null rows attend to a learned null memory and a null speaker embedding,
    so their output is independent of the supplied condition content.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.in_proj = nn.Linear(cfg.latent_dim, d)
        layers: list[nn.Module] = []
        for i in range(cfg.time_layers):
            if i:
                layers.append(nn.SiLU())
            layers.append(nn.Linear(d, d))
        self.time_mlp = nn.Sequential(*layers)
        # Index cfg.speaker_count is the learned null speaker.
        self.speaker_emb = nn.Embedding(cfg.speaker_count + 1, d)
        self.audio_proj = nn.Linear(cfg.audio_dim, d)
        self.null_audio = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.out_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.latent_dim)

    def forward(self, x, t, audio, speaker, null_mask):
        B, L, _ = x.shape
        if audio.shape[1] != L:
            raise DiffusionError(
                f"audio feature length {audio.shape[1]} != latent length {L}"
            )
        d = self.cfg.d_model
        pos = _sinusoidal(torch.arange(L), d)[None]
        speaker = torch.where(
            null_mask, torch.full_like(speaker, self.cfg.speaker_count), speaker
        )
        emb = self.time_mlp(_sinusoidal(t, d)) + self.speaker_emb(speaker)
        h = self.in_proj(x) + pos + emb[:, None, :]
        memory = torch.where(
            null_mask[:, None, None],
            self.null_audio.expand(B, L, d),
            self.audio_proj(audio) + pos,
        )
        for block in self.blocks:
            h = block(h, memory)
        return self.out_proj(self.out_norm(h))


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# ---------------------------------------------------------------------------
# Model wrapper (network + latent standardization)
# ---------------------------------------------------------------------------


@dataclass
class DiffusionModel:
    """Denoiser plus the latent standardization fitted on its training data.

    The reverse chain runs in standardized space; public sampling returns
    de-standardized latents ready for the motion decoder.
    """

    net: Denoiser
    config: DenoiserConfig
    latent_mean: np.ndarray
    latent_std: np.ndarray

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.latent_mean) / self.latent_std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.latent_std + self.latent_mean


def make_model(config: DenoiserConfig, seed: int = 0) -> DiffusionModel:
    torch.manual_seed(seed)
    net = Denoiser(config)
    net.eval()
    d = config.latent_dim
    return DiffusionModel(net, config, np.zeros(d, dtype=np.float32), np.ones(d, dtype=np.float32))


def _net_of(model) -> "Denoiser | nn.Module":
    return model.net if isinstance(model, DiffusionModel) else model


def _cond_tensors(cond: ConditioningBundle, batch: int = 1):
    audio = torch.from_numpy(np.ascontiguousarray(cond.audio_features))
    audio = audio.unsqueeze(0).expand(batch, -1, -1)
    speaker = torch.full((batch,), cond.speaker_id, dtype=torch.long)
    null = torch.full((batch,), cond.null_flag, dtype=torch.bool)
    return audio, speaker, null


def predict_x0(model, x_t: np.ndarray, t: int, cond: ConditioningBundle) -> np.ndarray:
    """Run the denoiser once on a single sequence: (L, D) -> predicted x0."""
    x = torch.from_numpy(np.asarray(x_t, dtype=np.float32))[None]
    if cond.length != x.shape[1]:
        raise DiffusionError(
            f"condition length {cond.length} != latent length {x.shape[1]}"
        )
    audio, speaker, null = _cond_tensors(cond)
    with torch.no_grad():
        out = _net_of(model)(x, torch.tensor([t]), audio, speaker, null)
    return out[0].numpy()


def cfg_combine(cond_pred: np.ndarray, uncond_pred: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    cond_pred = np.asarray(cond_pred)
    uncond_pred = np.asarray(uncond_pred)
    if cond_pred.shape != uncond_pred.shape:
        raise DiffusionError("guidance inputs must have equal shapes")
    return uncond_pred + scale * (cond_pred - uncond_pred)


# ---------------------------------------------------------------------------
# Training objective
# ---------------------------------------------------------------------------


def training_loss(
    model,
    x0: torch.Tensor,
    audio: torch.Tensor,
    speaker: torch.Tensor,
    schedule: NoiseSchedule,
    p_uncond: float = 0.1,
    generator: torch.Generator | None = None,
    t_batch: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
    drop_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared error between x0 and the denoiser's prediction.

    Per element: t ~ U[1, T], noise ~ N(0, I), x_t from the forward process,
    and with probability p_uncond the condition is replaced by the null
    condition. The stochastic draws can be pinned (t_batch/noise/drop_mask)
    for deterministic tests and gradient checks.
    """
    if not 0.0 <= p_uncond <= 1.0:
        raise DiffusionError(f"p_uncond must be in [0, 1], got {p_uncond}")
    if x0.ndim != 3 or x0.shape[0] < 1:
        raise DiffusionError("x0 batch must be (B, L, D) with B >= 1")
    B = x0.shape[0]
    if t_batch is None:
        t_batch = torch.randint(1, schedule.steps + 1, (B,), generator=generator)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    if drop_mask is None:
        if p_uncond == 0.0:
            drop_mask = torch.zeros(B, dtype=torch.bool)
        else:
            drop_mask = torch.rand(B, generator=generator) < p_uncond
    ab = torch.from_numpy(schedule.alpha_bars).to(x0.dtype)[t_batch - 1]
    x_t = _q_sample_t(x0, ab[:, None, None], noise)
    pred = _net_of(model)(x_t, t_batch, audio, speaker, drop_mask)
    return ((pred - x0) ** 2).mean()


@dataclass
class DiffusionTrainConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 0.0002
    epochs: int = 3000
    batch_size: int = 256
    p_uncond: float = 0.1
    seed: int = 0
    model: DenoiserConfig = field(default_factory=DenoiserConfig)


def train_diffusion(
    dataset: list[tuple[np.ndarray, ConditioningBundle]],
    config: DiffusionTrainConfig,
    init_model: DiffusionModel | None = None,
) -> tuple[DiffusionModel, NoiseSchedule, list[dict]]:
    """Train the denoiser on (latent, conditioning) pairs.

    Latents are standardized per dimension using statistics of the training
    set (or the init model's statistics when fine-tuning from a checkpoint).
    Aborts with the last good epoch on a non-finite loss.
    """
    if not dataset:
        raise DiffusionError("empty diffusion training dataset")
    schedule = make_linear_schedule(config.steps, config.beta_start, config.beta_end)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    if init_model is None:
        model = make_model(config.model, seed=config.seed)
        stacked = np.concatenate([x.reshape(-1, x.shape[-1]) for x, _ in dataset])
        model.latent_mean = stacked.mean(axis=0).astype(np.float32)
        model.latent_std = np.maximum(stacked.std(axis=0), 1e-6).astype(np.float32)
    else:
        model = init_model
        if model.config != config.model:
            raise DiffusionError("fine-tune model config differs from checkpoint config")
    net = model.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)

    by_len: dict[int, list[int]] = {}
    for i, (x, cond) in enumerate(dataset):
        if cond.length != x.shape[0]:
            raise DiffusionError(f"dataset item {i}: condition/latent length mismatch")
        by_len.setdefault(x.shape[0], []).append(i)
    xs = [torch.from_numpy(model.normalize(x).astype(np.float32)) for x, _ in dataset]
    auds = [torch.from_numpy(c.audio_features) for _, c in dataset]
    spks = torch.tensor([c.speaker_id for _, c in dataset], dtype=torch.long)

    history: list[dict] = []
    last_good = copy.deepcopy(net.state_dict())
    for epoch in range(config.epochs):
        total, n_batches = 0.0, 0
        for indices in by_len.values():
            order = rng.permutation(indices)
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                loss = training_loss(
                    model,
                    torch.stack([xs[i] for i in idx]),
                    torch.stack([auds[i] for i in idx]),
                    spks[torch.from_numpy(idx)],
                    schedule,
                    config.p_uncond,
                    generator=gen,
                )
                if not torch.isfinite(loss):
                    net.load_state_dict(last_good)
                    net.eval()
                    raise TrainingDiverged(
                        f"diffusion loss non-finite at epoch {epoch}", model, history
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
                n_batches += 1
        history.append({"epoch": epoch, "loss": total / n_batches})
        last_good = copy.deepcopy(net.state_dict())
    net.eval()
    return model, schedule, history


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def make_cfg_predictor(model, cond: ConditioningBundle, guidance_scale: float):
    """Batched x0 predictor with classifier-free guidance baked in.

    Returns fn(x_t (B, L, D) tensor, t int) -> x0hat tensor. guidance 1.0
    short-circuits to the pure conditional prediction.
    """
    net = _net_of(model)

    def predict(x: torch.Tensor, t: int) -> torch.Tensor:
        B, L, _ = x.shape
        if cond.length != L:
            raise DiffusionError(f"condition length {cond.length} != latent length {L}")
        audio, speaker, null = _cond_tensors(cond, B)
        ts = torch.full((B,), t, dtype=torch.long)
        with torch.no_grad():
            c = net(x, ts, audio, speaker, null)
            if guidance_scale == 1.0:
                return c
            u = net(x, ts, audio, speaker, torch.ones(B, dtype=torch.bool))
        return u + guidance_scale * (c - u)

    return predict


def posterior_step(
    x_t: torch.Tensor,
    x0_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    variance_mode: str = "posterior",
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} given the clean-latent estimate.

    Uses the standard forward-process posterior mean; variance is the
    posterior variance by default or beta_t with variance_mode="beta".
    No noise is added at t = 1.
    """
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    beta_t = schedule.beta(t)
    coef0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    coef_t = math.sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = coef0 * x0_hat + coef_t * x_t
    if t == 1:
        return mean
    if variance_mode == "posterior":
        var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    elif variance_mode == "beta":
        var = beta_t
    else:
        raise DiffusionError(f"unknown variance_mode {variance_mode!r}")
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + math.sqrt(var) * noise


def denoise_step(
    model,
    x_t: np.ndarray,
    t: int,
    cond: ConditioningBundle,
    schedule: NoiseSchedule,
    guidance_scale: float = 1.0,
    generator: torch.Generator | None = None,
    clip_range: float | None = 4.0,
    variance_mode: str = "posterior",
) -> np.ndarray:
    """Single-sequence reverse step (L, D) -> (L, D) at step t.

    The x0 estimate is guidance-combined, clipped to +-clip_range, then fed
    through the posterior. Deterministic at t = 1.
    """
    if t < 1:
        raise DiffusionError(f"denoise step requires t >= 1, got {t}")
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    x = torch.from_numpy(np.asarray(x_t, dtype=np.float32))[None]
    x0_hat = make_cfg_predictor(model, cond, guidance_scale)(x, t)
    if clip_range is not None:
        x0_hat = x0_hat.clamp(-clip_range, clip_range)
    return posterior_step(x, x0_hat, t, schedule, generator, variance_mode)[0].numpy()


def reverse_chain(
    predict_fn,
    latent_length: int,
    latent_dim: int,
    schedule: NoiseSchedule,
    seed: int,
    batch: int = 1,
    clip_range: float | None = 4.0,
    variance_mode: str = "posterior",
    step_hook=None,
) -> np.ndarray:
    """Full reverse chain from x_T ~ N(0, I) down to x_0.

    `predict_fn(x, t)` supplies the (merged, guidance-combined) x0 estimate.
    `step_hook(x, level, generator)`, when given, may transform the state
    after each step; `level` is the noise level of the state it receives.
    Returns (batch, L, D) float32; reproducible from the seed.
    """
    generator = torch.Generator().manual_seed(seed)
    x = torch.randn((batch, latent_length, latent_dim), generator=generator)
    for t in range(schedule.steps, 0, -1):
        x0_hat = predict_fn(x, t)
        if not torch.isfinite(x0_hat).all():
            raise DiffusionError(f"non-finite prediction at step {t}")
        if clip_range is not None:
            x0_hat = x0_hat.clamp(-clip_range, clip_range)
        x = posterior_step(x, x0_hat, t, schedule, generator, variance_mode)
        if step_hook is not None and t > 1:
            x = step_hook(x, t - 1, generator)
    return x.numpy()


def sample(
    model: DiffusionModel,
    cond: ConditioningBundle,
    latent_length: int,
    schedule: NoiseSchedule,
    guidance_scale: float = 2.5,
    seed: int = 0,
    clip_range: float | None = 4.0,
    variance_mode: str = "posterior",
) -> LatentSequence:
    """Draw one latent sequence from the model under the given conditioning."""
    if latent_length < 1:
        raise DiffusionError("latent_length must be >= 1")
    predict = make_cfg_predictor(model, cond, guidance_scale)
    out = reverse_chain(
        predict, latent_length, model.config.latent_dim, schedule, seed,
        clip_range=clip_range, variance_mode=variance_mode,
    )
    return LatentSequence(model.denormalize(out[0]))


def sample_batch(
    model: DiffusionModel,
    cond: ConditioningBundle,
    latent_length: int,
    schedule: NoiseSchedule,
    n: int,
    guidance_scale: float = 2.5,
    seed: int = 0,
    clip_range: float | None = 4.0,
) -> np.ndarray:
    """n independent chains run as one batch; returns (n, L, D) de-standardized."""
    predict = make_cfg_predictor(model, cond, guidance_scale)
    out = reverse_chain(
        predict, latent_length, model.config.latent_dim, schedule, seed,
        batch=n, clip_range=clip_range,
    )
    return model.denormalize(out)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_diffusion(
    model: DiffusionModel,
    train_config: DiffusionTrainConfig,
    history: list[dict],
    path: str | Path,
) -> None:
    cfg = asdict(train_config)
    cfg["model"] = asdict(train_config.model)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "diffusion",
            "train_config": cfg,
            "state_dict": model.net.state_dict(),
            "latent_mean": model.latent_mean,
            "latent_std": model.latent_std,
            "loss_history": history,
        },
        path,
    )


def load_diffusion(
    path: str | Path, expect_latent_dim: int | None = None
) -> tuple[DiffusionModel, DiffusionTrainConfig, list[dict]]:
    blob = torch.load(path, weights_only=False)
    if blob.get("kind") != "diffusion":
        raise DiffusionError(f"{path}: not a diffusion checkpoint")
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise DiffusionError(f"{path}: unsupported checkpoint version")
    cfg_dict = dict(blob["train_config"])
    model_cfg = DenoiserConfig(**cfg_dict.pop("model"))
    train_cfg = DiffusionTrainConfig(model=model_cfg, **cfg_dict)
    if expect_latent_dim is not None and model_cfg.latent_dim != expect_latent_dim:
        raise DiffusionError(
            f"checkpoint has D={model_cfg.latent_dim}, expected {expect_latent_dim}"
        )
    model = DiffusionModel(
        Denoiser(model_cfg), model_cfg, blob["latent_mean"], blob["latent_std"]
    )
    model.net.load_state_dict(blob["state_dict"])
    model.net.eval()
    return model, train_cfg, blob.get("loss_history", [])
