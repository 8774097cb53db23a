"""Motion autoencoder with a vector-quantization codebook.

Encodes rotation-matrix clips into a 4x temporally downsampled continuous
latent space, quantizes against a learned codebook, and decodes back to
valid rotations. The downstream generative model operates on the continuous
(pre-quantization) latents; tokens are used for corpus and database work.

The encoder/decoder are strictly blockwise temporal CNNs (kernel == stride
everywhere), so the receptive field of one latent frame is exactly one
4-frame block. Consequence: encoding is length-equivariant for clips whose
length is a multiple of 4 (the receptive-field-safe block size), and
concatenating clips concatenates their latents.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .motion import (
    MotionClip,
    MotionError,
    Skeleton,
    _difference_values,
    project_to_rotations,
)

DOWNSAMPLE = 4

CHECKPOINT_VERSION = 1


class VqvaeError(ValueError):
    """Raised for invalid latents, codebooks, or model/data mismatches."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last good model and history."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history or []


@dataclass(frozen=True)
class LatentSequence:
    """Downsampled continuous embedding of a clip, shape (Lz, D)."""

    values: np.ndarray
    source_fps: float = 30.0
    downsample: int = DOWNSAMPLE

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise VqvaeError(f"latent values must be 2-D (Lz, D), got {values.shape}")
        if not np.isfinite(values).all():
            raise VqvaeError("latent values must be finite")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def latent_fps(self) -> float:
        return self.source_fps / self.downsample


@dataclass(frozen=True)
class TokenSequence:
    """Codebook indices for a latent sequence."""

    tokens: np.ndarray
    codebook_size: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        object.__setattr__(self, "tokens", tokens)
        if tokens.ndim != 1:
            raise VqvaeError("tokens must be 1-D")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.codebook_size):
            raise VqvaeError("token out of codebook range")


@dataclass(frozen=True)
class Codebook:
    """N latent lexemes of dimension D."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float32)
        object.__setattr__(self, "entries", entries)
        if entries.ndim != 2 or entries.shape[0] < 2:
            raise VqvaeError(f"codebook needs >= 2 entries of equal dim, got {entries.shape}")
        if not np.isfinite(entries).all():
            raise VqvaeError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class VqvaeConfig:
    latent_dim: int = 64
    codebook_size: int = 512
    hidden: int = 64
    fps: float = 30.0
    alpha_vel: float = 1.0
    alpha_acc: float = 1.0
    lr: float = 0.001
    epochs: int = 400
    batch_size: int = 16
    seed: int = 0


class _VqvaeNet(nn.Module):
    """Blockwise conv encoder/decoder plus the codebook table."""

    def __init__(self, in_dim: int, cfg: VqvaeConfig):
        super().__init__()
        h, d = cfg.hidden, cfg.latent_dim
        self.encoder = nn.Sequential(
            nn.Conv1d(in_dim, h, kernel_size=2, stride=2),
            nn.GELU(),
            nn.Conv1d(h, h, kernel_size=2, stride=2),
            nn.GELU(),
            nn.Conv1d(h, h, kernel_size=1),
            nn.GELU(),
            nn.Conv1d(h, d, kernel_size=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv1d(d, h, kernel_size=1),
            nn.GELU(),
            nn.ConvTranspose1d(h, h, kernel_size=2, stride=2),
            nn.GELU(),
            nn.ConvTranspose1d(h, h, kernel_size=2, stride=2),
            nn.GELU(),
            nn.Conv1d(h, in_dim, kernel_size=1),
        )
        self.codebook = nn.Parameter(torch.randn(cfg.codebook_size, d) * 0.1)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L, C) -> (B, L/4, D); L must be a multiple of 4."""
        return self.encoder(x.transpose(1, 2)).transpose(1, 2)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """(B, Lz, D) -> (B, 4*Lz, C)."""
        return self.decoder(z.transpose(1, 2)).transpose(1, 2)

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        dist = torch.cdist(z.reshape(-1, z.shape[-1]), self.codebook)
        tokens = dist.argmin(dim=1)
        return tokens.reshape(z.shape[:-1]), self.codebook[tokens].reshape(z.shape)


class VqvaeModel:
    """Trained (or trainable) motion autoencoder bound to one skeleton."""

    def __init__(self, skeleton: Skeleton, config: VqvaeConfig):
        self.skeleton = skeleton
        self.config = config
        self.net = _VqvaeNet(skeleton.joint_count * 9, config)
        self.net.eval()

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def downsample(self) -> int:
        return DOWNSAMPLE

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.net.codebook.detach().numpy().copy())


def _clip_to_tensor(model: VqvaeModel, clip: MotionClip) -> torch.Tensor:
    J = model.skeleton.joint_count
    if clip.skeleton.joint_count != J:
        raise VqvaeError(
            f"clip has {clip.skeleton.joint_count} joints, model expects {J}"
        )
    if clip.fps != model.config.fps:
        raise VqvaeError(f"clip fps {clip.fps} != training fps {model.config.fps}")
    x = clip.flat().reshape(clip.length, J * 9)
    pad = (-clip.length) % DOWNSAMPLE
    if pad:
        x = np.concatenate([x, np.repeat(x[-1:], pad, axis=0)], axis=0)
    return torch.from_numpy(x.astype(np.float32)).unsqueeze(0)


def encode(model: VqvaeModel, clip: MotionClip) -> LatentSequence:
    """Encode a clip into its continuous latent sequence (length ceil(L/4)).

    Clips whose length is not a multiple of 4 are edge-padded before the
    blockwise encoder runs.
    """
    if clip.length < DOWNSAMPLE:
        raise VqvaeError(f"clip length {clip.length} < downsample factor {DOWNSAMPLE}")
    with torch.no_grad():
        z = model.net.encode(_clip_to_tensor(model, clip))
    return LatentSequence(z[0].numpy(), source_fps=clip.fps)


def quantize(latents: LatentSequence, codebook: Codebook) -> tuple[TokenSequence, LatentSequence]:
    """Snap each latent vector to its nearest codebook entry (L2, ties -> lowest index)."""
    if latents.dim != codebook.dim:
        raise VqvaeError(f"latent dim {latents.dim} != codebook dim {codebook.dim}")
    e = latents.values.astype(np.float64)
    z = codebook.entries.astype(np.float64)
    # (Lz, N) squared distances; argmin takes the first (lowest) index on ties.
    d2 = (e * e).sum(1)[:, None] - 2.0 * e @ z.T + (z * z).sum(1)[None, :]
    tokens = d2.argmin(axis=1)
    quantized = codebook.entries[tokens]
    return (
        TokenSequence(tokens, codebook.size),
        LatentSequence(quantized, latents.source_fps, latents.downsample),
    )


def decode(model: VqvaeModel, latents: LatentSequence) -> MotionClip:
    """Decode latents to a clip of 4*Lz frames with valid rotations.

    Raw decoder outputs are projected to the nearest proper rotation
    matrices, so the result passes rotation validation by construction.
    """
    if latents.length < 1:
        raise VqvaeError("empty latent sequence")
    if latents.dim != model.latent_dim:
        raise VqvaeError(f"latent dim {latents.dim}, model expects {model.latent_dim}")
    z = torch.from_numpy(latents.values).unsqueeze(0)
    with torch.no_grad():
        raw = model.net.decode(z)[0].numpy()
    L = raw.shape[0]
    J = model.skeleton.joint_count
    frames = project_to_rotations(raw.reshape(L, J, 3, 3).astype(np.float64))
    return MotionClip(model.skeleton, model.config.fps, frames)


def vq_loss(
    latents: LatentSequence,
    quantized: LatentSequence,
    recon: MotionClip,
    target: MotionClip,
    alpha_vel: float = 1.0,
    alpha_acc: float = 1.0,
) -> dict:
    """Loss breakdown for one (reconstruction, target) pair.

    recon term: mean-L1 position error plus weighted mean-L1 velocity and
    acceleration errors (finite differences of the flattened rotations).
    codebook/commitment terms: mean squared error between the continuous
    latents and their quantized counterparts; only the gradient routing
    (stop-gradient side) distinguishes the two, their values are equal.
    """
    if alpha_vel < 0 or alpha_acc < 0:
        raise VqvaeError("derivative loss weights must be >= 0")
    if recon.frames.shape != target.frames.shape:
        raise VqvaeError("reconstruction/target shape mismatch")
    if latents.values.shape != quantized.values.shape:
        raise VqvaeError("latent/quantized shape mismatch")
    r, m = recon.flat(), target.flat()
    pos = np.abs(r - m).mean()
    vel = np.abs(_difference_values(r, 1) - _difference_values(m, 1)).mean()
    acc = np.abs(_difference_values(r, 2) - _difference_values(m, 2)).mean()
    recon_term = pos + alpha_vel * vel + alpha_acc * acc
    q_err = ((latents.values - quantized.values) ** 2).mean()
    return {
        "recon": float(recon_term),
        "codebook": float(q_err),
        "commitment": float(q_err),
        "total": float(recon_term + 2.0 * q_err),
    }


def _diff_t(x: torch.Tensor, order: int) -> torch.Tensor:
    """Torch mirror of motion._difference_values along dim 1 of (B, L, C)."""
    if order == 1:
        inner = (x[:, 2:] - x[:, :-2]) / 2.0
        first = (x[:, 1:2] - x[:, 0:1])
        last = (x[:, -1:] - x[:, -2:-1])
    else:
        inner = x[:, 2:] - 2.0 * x[:, 1:-1] + x[:, :-2]
        first = x[:, 2:3] - 2.0 * x[:, 1:2] + x[:, 0:1]
        last = x[:, -1:] - 2.0 * x[:, -2:-1] + x[:, -3:-2]
    return torch.cat([first, inner, last], dim=1)


def _loss_t(net: _VqvaeNet, x: torch.Tensor, cfg: VqvaeConfig) -> tuple[torch.Tensor, dict, torch.Tensor]:
    """Training loss on a batch (B, L, C); returns (loss, parts, tokens).

    Reconstruction runs through the continuous latents: that is the path the
    generative model and the public decoder use (quantization serves corpus
    tokenization and the gesture database, not generation). The two
    quantization terms still fit the codebook to the encoder distribution.
    """
    e = net.encode(x)
    tokens, q = net.quantize(e)
    recon = net.decode(e)
    pos = (recon - x).abs().mean()
    vel = (_diff_t(recon, 1) - _diff_t(x, 1)).abs().mean()
    acc = (_diff_t(recon, 2) - _diff_t(x, 2)).abs().mean()
    recon_term = pos + cfg.alpha_vel * vel + cfg.alpha_acc * acc
    commitment = ((e - q.detach()) ** 2).mean()
    codebook = ((e.detach() - q) ** 2).mean()
    loss = recon_term + commitment + codebook
    parts = {
        "recon": recon_term.item(),
        "codebook": codebook.item(),
        "commitment": commitment.item(),
        "mse": ((recon - x) ** 2).mean().item(),
    }
    return loss, parts, tokens


def train_vqvae(
    dataset: list[MotionClip], config: VqvaeConfig
) -> tuple[VqvaeModel, list[dict]]:
    """Train an autoencoder on 30 fps clips; reproducible from config.seed.

    Codebook entries unused for a full epoch are reseeded to random encoder
    outputs from that epoch (prevents codebook collapse). A non-finite loss
    aborts with the last good epoch's parameters attached to the exception.
    """
    if not dataset:
        raise VqvaeError("empty training dataset")
    skeleton = dataset[0].skeleton
    for c in dataset:
        if c.fps != config.fps:
            raise VqvaeError(f"all clips must be at {config.fps} fps")
        if c.skeleton.joint_count != skeleton.joint_count:
            raise VqvaeError("all clips must share one skeleton")

    torch.manual_seed(config.seed)
    model = VqvaeModel(skeleton, config)
    net = model.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)

    # Group clip indices by length so each batch stacks cleanly.
    by_len: dict[int, list[int]] = {}
    for i, c in enumerate(dataset):
        by_len.setdefault(c.length, []).append(i)
    tensors = [_clip_to_tensor(model, c)[0] for c in dataset]

    history: list[dict] = []
    last_good = copy.deepcopy(net.state_dict())
    for epoch in range(config.epochs):
        used = torch.zeros(config.codebook_size, dtype=torch.bool)
        latent_pool: torch.Tensor | None = None
        sums: dict[str, float] = {}
        n_batches = 0
        for indices in by_len.values():
            order = rng.permutation(indices)
            for start in range(0, len(order), config.batch_size):
                batch = torch.stack([tensors[i] for i in order[start : start + config.batch_size]])
                loss, parts, tokens = _loss_t(net, batch, config)
                if not torch.isfinite(loss):
                    net.load_state_dict(last_good)
                    net.eval()
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch}", model, history
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                used[tokens.reshape(-1)] = True
                with torch.no_grad():
                    latent_pool = net.encode(batch).reshape(-1, config.latent_dim)
                sums["total"] = sums.get("total", 0.0) + loss.item()
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
        dead = (~used).nonzero().reshape(-1)
        if len(dead) and latent_pool is not None:
            picks = rng.integers(0, latent_pool.shape[0], size=len(dead))
            with torch.no_grad():
                net.codebook[dead] = latent_pool[picks]
        history.append({k: v / n_batches for k, v in sums.items()} | {"epoch": epoch})
        last_good = copy.deepcopy(net.state_dict())
    net.eval()
    return model, history


def reconstruction_mse(model: VqvaeModel, clips: list[MotionClip]) -> float:
    """Mean per-entry squared error of decode(encode(clip)) over raw frames."""
    total, count = 0.0, 0
    for clip in clips:
        x = _clip_to_tensor(model, clip)
        with torch.no_grad():
            raw = model.net.decode(model.net.encode(x))
        err = (raw - x).numpy()[0][: clip.length]
        total += float((err**2).sum())
        count += err[: clip.length].size
    return total / count


def save_vqvae(model: VqvaeModel, history: list[dict], path: str | Path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "vqvae",
            "config": asdict(model.config),
            "joint_names": list(model.skeleton.joint_names),
            "parents": list(model.skeleton.parents),
            "state_dict": model.net.state_dict(),
            "loss_history": history,
        },
        path,
    )


def load_vqvae(
    path: str | Path,
    expect_joint_count: int | None = None,
    expect_latent_dim: int | None = None,
) -> tuple[VqvaeModel, list[dict]]:
    """Load a checkpoint; rejects wrong kind/version and J or D mismatches."""
    blob = torch.load(path, weights_only=False)
    if blob.get("kind") != "vqvae":
        raise VqvaeError(f"{path}: not a vqvae checkpoint")
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise VqvaeError(f"{path}: unsupported checkpoint version")
    skeleton = Skeleton(tuple(blob["joint_names"]), tuple(blob["parents"]))
    config = VqvaeConfig(**blob["config"])
    if expect_joint_count is not None and skeleton.joint_count != expect_joint_count:
        raise VqvaeError(
            f"checkpoint has J={skeleton.joint_count}, expected {expect_joint_count}"
        )
    if expect_latent_dim is not None and config.latent_dim != expect_latent_dim:
        raise VqvaeError(
            f"checkpoint has D={config.latent_dim}, expected {expect_latent_dim}"
        )
    model = VqvaeModel(skeleton, config)
    model.net.load_state_dict(blob["state_dict"])
    model.net.eval()
    return model, blob.get("loss_history", [])
