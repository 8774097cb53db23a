"""Evaluation metrics: distribution distance, beat consistency, diversity,
and semantically weighted keypoint recall, plus the motion-beat detector and
feature extractor they rely on.

All metrics are pure functions over numpy arrays / motion clips.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .motion import MotionClip, forward_kinematics_unit
from .vqvae import LatentSequence, VqvaeModel, encode


class MetricError(ValueError):
    """Raised for degenerate metric inputs."""


@dataclass(frozen=True)
class FeatureSet:
    """M feature vectors of dimension F plus the extractor that made them."""

    vectors: np.ndarray
    extractor: str = "unknown"

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "vectors", v)
        if v.ndim != 2:
            raise MetricError(f"feature vectors must be (M, F), got {v.shape}")
        if not np.isfinite(v).all():
            raise MetricError("feature vectors must be finite")


@dataclass(frozen=True)
class BeatTrack:
    """Strictly increasing beat times in seconds."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", t)
        if t.ndim != 1:
            raise MetricError("beat times must be 1-D")
        if len(t) > 1 and not (np.diff(t) > 0).all():
            raise MetricError("beat times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fgd(real: FeatureSet, gen: FeatureSet, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2)), with ridge * I
    added to both covariances. The cross term uses the eigendecomposition of
    the symmetrized product S_r^(1/2) S_g S_r^(1/2); eigenvalues below -1e-8
    are an error, small negatives are clamped to zero.
    """
    for fs in (real, gen):
        if fs.vectors.shape[0] < 2:
            raise MetricError("need at least 2 feature vectors per set")
    if real.vectors.shape[1] != gen.vectors.shape[1]:
        raise MetricError("feature dimension mismatch")
    mu_r, mu_g = real.vectors.mean(axis=0), gen.vectors.mean(axis=0)
    eye = np.eye(real.vectors.shape[1])
    sig_r = np.cov(real.vectors, rowvar=False) + ridge * eye
    sig_g = np.cov(gen.vectors, rowvar=False) + ridge * eye
    root_r = _sqrt_psd(sig_r)
    inner = root_r @ sig_g @ root_r
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < -1e-8:
        raise MetricError(f"cross-covariance product has eigenvalue {vals.min():.3e}")
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_r - mu_g
    return float(diff @ diff + np.trace(sig_r) + np.trace(sig_g) - 2.0 * cross)


def _angular_speed(clip: MotionClip) -> np.ndarray:
    """Total geodesic rotation angle between consecutive frames, length L-1.

    Entry i measures the change from frame i to frame i+1 (time i + 0.5
    frames), summed over joints; exactly reverses when the clip reverses.
    """
    R = clip.frames
    rel_trace = np.einsum("fjab,fjab->fj", R[:-1], R[1:])  # tr(R_i^T R_{i+1})
    cosang = np.clip((rel_trace - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(cosang).sum(axis=1)


def detect_motion_beats(
    clip: MotionClip, smooth_seconds: float = 0.1, rel_threshold: float = 0.5
) -> BeatTrack:
    """Beats at local minima of the smoothed total angular speed.

    Minima must be strict on both sides and fall below an adaptive threshold
    (min + rel_threshold * (max - min) of the smoothed curve). A constant
    clip yields an empty track.
    """
    if clip.length < 5:
        raise MetricError(f"need at least 5 frames, got {clip.length}")
    speed = _angular_speed(clip)
    smooth = gaussian_filter1d(speed, sigma=max(smooth_seconds * clip.fps, 1e-6), mode="reflect")
    lo, hi = smooth.min(), smooth.max()
    if hi - lo <= 1e-12:
        return BeatTrack(np.empty(0))
    thresh = lo + rel_threshold * (hi - lo)
    inner = smooth[1:-1]
    is_min = (inner < smooth[:-2]) & (inner < smooth[2:]) & (inner <= thresh)
    idx = np.nonzero(is_min)[0] + 1
    return BeatTrack((idx + 0.5) / clip.fps)


def beat_consistency(
    audio_beats: BeatTrack, motion: MotionClip, sigma_bc: float = 0.1
) -> float:
    """Mean exponential-kernel proximity of audio beats to motion beats.

    BC = mean over audio beats of exp(-(nearest motion beat distance)^2 /
    (2 sigma_bc^2)); 0 when the motion has no detected beats.
    """
    if sigma_bc <= 0:
        raise MetricError(f"sigma_bc must be positive, got {sigma_bc}")
    if len(audio_beats) == 0:
        raise MetricError("audio beat track is empty")
    motion_beats = detect_motion_beats(motion)
    return beat_consistency_tracks(audio_beats, motion_beats, sigma_bc)


def beat_consistency_tracks(
    audio_beats: BeatTrack, motion_beats: BeatTrack, sigma_bc: float = 0.1
) -> float:
    """BC from precomputed beat tracks (same kernel as beat_consistency)."""
    if sigma_bc <= 0:
        raise MetricError(f"sigma_bc must be positive, got {sigma_bc}")
    if len(audio_beats) == 0:
        raise MetricError("audio beat track is empty")
    if len(motion_beats) == 0:
        return 0.0
    dists = np.abs(audio_beats.times[:, None] - motion_beats.times[None, :]).min(axis=1)
    return float(np.exp(-(dists**2) / (2.0 * sigma_bc**2)).mean())


def diversity(samples: list) -> float:
    """Mean pairwise L2 distance over flattened samples (clips or latents)."""
    if len(samples) < 2:
        raise MetricError("diversity needs at least 2 samples")
    flats = []
    for s in samples:
        if isinstance(s, MotionClip):
            flats.append(s.frames.reshape(-1))
        elif isinstance(s, LatentSequence):
            flats.append(s.values.reshape(-1).astype(np.float64))
        else:
            flats.append(np.asarray(s, dtype=np.float64).reshape(-1))
    shape0 = flats[0].shape
    if any(f.shape != shape0 for f in flats):
        raise MetricError("all samples must have equal shapes")
    dists = [np.linalg.norm(a - b) for a, b in itertools.combinations(flats, 2)]
    return float(np.mean(dists))


def srgr(
    gen: MotionClip,
    gt: MotionClip,
    semantic_spans: list[tuple[int, int]] | None = None,
    weight: float = 2.0,
    threshold: float = 0.1,
) -> float:
    """Semantically weighted probability of correct keypoints.

    Joints are mapped to positions by unit-bone forward kinematics; a joint
    is correct in a frame when its position error is below `threshold`.
    Frames inside the half-open semantic spans carry weight `weight`, others
    weight 1; the result is the weighted mean correctness in [0, 1].
    """
    if gen.skeleton.joint_count != gt.skeleton.joint_count:
        raise MetricError("skeleton mismatch between generated and ground truth")
    if gen.length != gt.length:
        raise MetricError(f"length mismatch: {gen.length} vs {gt.length}")
    err = np.linalg.norm(
        forward_kinematics_unit(gen) - forward_kinematics_unit(gt), axis=2
    )
    correct = (err < threshold).astype(np.float64)
    weights = np.ones(gen.length)
    for a, b in semantic_spans or []:
        if not (0 <= a < b <= gen.length):
            raise MetricError(f"semantic span [{a}, {b}) outside timeline")
        weights[a:b] = weight
    return float((correct * weights[:, None]).sum() / (weights.sum() * correct.shape[1]))


def extract_features(clips: list[MotionClip], vqvae: VqvaeModel) -> FeatureSet:
    """Per-clip feature: temporal mean and std of the latent encoding (F = 2D)."""
    rows = []
    for clip in clips:
        z = encode(vqvae, clip).values
        rows.append(np.concatenate([z.mean(axis=0), z.std(axis=0)]))
    return FeatureSet(np.stack(rows), extractor="vqvae-latent-moments")
