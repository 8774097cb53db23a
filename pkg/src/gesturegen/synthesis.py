"""Procedural paired corpus: motion, rhythm features, transcripts, labels.

Generates a desk-scale stand-in for a real speech-gesture corpus. Each clip
is an idle pose plus per-speaker sinusoidal arm swings phase-locked to a bpm
beat grid (the swing velocity vanishes exactly on beats, so the grid is
recoverable by the motion-beat detector), with optional analytic semantic
gesture templates spliced in at labeled transcript words. Pseudo-audio
features encode beat phase, energy, and speaker identity per latent frame.

Everything is reproducible from the corpus seed; per-clip seeds are spawned
from it so generation can run in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .motion import MotionClip, Skeleton, euler_to_rotation_matrices, save_motion, load_motion
from .semantics import TranscriptWord, save_transcript, load_transcript

CANONICAL_JOINTS = (
    ("hips", -1), ("spine", 0), ("chest", 1), ("neck", 2), ("head", 3),
    ("jaw", 4), ("l_shoulder", 2), ("l_elbow", 6), ("l_wrist", 7),
    ("r_shoulder", 2), ("r_elbow", 9), ("r_wrist", 10),
)

FILLER_WORDS = (
    "so", "and", "then", "well", "now", "here", "really", "very", "today",
    "people", "think", "know", "about", "because", "always", "maybe",
)


def default_skeleton(joint_count: int = 12) -> Skeleton:
    """The canonical 12-joint upper-body skeleton, truncated or extended."""
    names = [n for n, _ in CANONICAL_JOINTS[:joint_count]]
    parents = [p for _, p in CANONICAL_JOINTS[:joint_count]]
    for j in range(len(CANONICAL_JOINTS), joint_count):
        names.append(f"extra_{j}")
        parents.append(2 if joint_count > 2 else 0)
    return Skeleton(tuple(names), tuple(parents))


# ---------------------------------------------------------------------------
# Semantic gesture templates (analytic keyframes, slerp-interpolated)
# ---------------------------------------------------------------------------

# Keyframes are (time fraction, {joint name: xyz Euler degrees}).
GESTURE_TEMPLATES: dict[str, dict] = {
    "point_left": {
        "label": "point to the left",
        "category": "deictic",
        "keywords": ("left",),
        "duration": 2.0,
        "keyframes": [
            (0.0, {}),
            (0.3, {"l_shoulder": (0, 0, 80), "l_elbow": (0, 0, 15)}),
            (0.7, {"l_shoulder": (0, 0, 80), "l_elbow": (0, 0, 15)}),
            (1.0, {}),
        ],
    },
    "point_right": {
        "label": "point to the right",
        "category": "deictic",
        "keywords": ("right",),
        "duration": 2.0,
        "keyframes": [
            (0.0, {}),
            (0.3, {"r_shoulder": (0, 0, -80), "r_elbow": (0, 0, -15)}),
            (0.7, {"r_shoulder": (0, 0, -80), "r_elbow": (0, 0, -15)}),
            (1.0, {}),
        ],
    },
    "open_arms": {
        "label": "open both arms",
        "category": "metaphoric",
        "keywords": ("wonderful", "open", "welcome"),
        "duration": 2.4,
        "keyframes": [
            (0.0, {}),
            (0.35, {"l_shoulder": (20, 0, 65), "r_shoulder": (20, 0, -65),
                    "l_elbow": (0, 0, 25), "r_elbow": (0, 0, -25)}),
            (0.65, {"l_shoulder": (20, 0, 65), "r_shoulder": (20, 0, -65),
                    "l_elbow": (0, 0, 25), "r_elbow": (0, 0, -25)}),
            (1.0, {}),
        ],
    },
    "thumbs_up": {
        "label": "thumbs up",
        "category": "emblem",
        "keywords": ("good", "great", "thumbs up"),
        "duration": 1.6,
        "keyframes": [
            (0.0, {}),
            (0.35, {"r_shoulder": (45, 0, -20), "r_elbow": (95, 0, 0), "r_wrist": (0, 20, 0)}),
            (0.7, {"r_shoulder": (45, 0, -20), "r_elbow": (95, 0, 0), "r_wrist": (0, 20, 0)}),
            (1.0, {}),
        ],
    },
    "nod": {
        "label": "nod the head",
        "category": "affirmation",
        "keywords": ("yes", "agree", "exactly"),
        "duration": 1.6,
        "keyframes": [
            (0.0, {}),
            (0.25, {"head": (24, 0, 0), "neck": (8, 0, 0)}),
            (0.5, {}),
            (0.75, {"head": (24, 0, 0), "neck": (8, 0, 0)}),
            (1.0, {}),
        ],
    },
}


def render_template(
    name: str, skeleton: Skeleton, fps: float = 30.0
) -> MotionClip:
    """Sample a template's keyframes into a clip by per-joint quaternion slerp."""
    spec = GESTURE_TEMPLATES[name]
    n_frames = int(round(spec["duration"] * fps))
    times = np.array([k[0] for k in spec["keyframes"]]) * (n_frames - 1)
    name_to_idx = {n: i for i, n in enumerate(skeleton.joint_names)}
    key_rots = np.zeros((len(times), skeleton.joint_count, 3))
    for k, (_, pose) in enumerate(spec["keyframes"]):
        for joint, deg in pose.items():
            if joint in name_to_idx:
                key_rots[k, name_to_idx[joint]] = np.radians(deg)
    sample_t = np.arange(n_frames, dtype=np.float64)
    frames = np.empty((n_frames, skeleton.joint_count, 3, 3))
    for j in range(skeleton.joint_count):
        rots = Rotation.from_euler("XYZ", key_rots[:, j])
        frames[:, j] = Slerp(times, rots)(sample_t).as_matrix()
    return MotionClip(skeleton, fps, frames)


def template_catalog(skeleton: Skeleton, fps: float = 30.0) -> list[dict]:
    """Labeled template clips in the shape build_database expects."""
    return [
        {
            "id": name,
            "label": spec["label"],
            "category": spec["category"],
            "keywords": list(spec["keywords"]),
            "clip": render_template(name, skeleton, fps),
            "source": "builtin-template",
        }
        for name, spec in GESTURE_TEMPLATES.items()
    ]


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticCorpusConfig:
    n_clips: int = 200
    clip_seconds: float = 12.0
    bpm_range: tuple[float, float] = (80.0, 140.0)
    joint_count: int = 12
    speaker_count: int = 4
    insertion_rate: float = 0.5
    feature_dim: int = 16
    fps: float = 30.0
    downsample: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.n_clips, self.joint_count, self.speaker_count) < 1:
            raise ValueError("n_clips, joint_count, speaker_count must be positive")
        if not 0.0 <= self.insertion_rate <= 1.0:
            raise ValueError("insertion_rate must be in [0, 1]")
        if self.clip_seconds <= 0 or self.fps <= 0:
            raise ValueError("clip_seconds and fps must be positive")


@dataclass
class CorpusClip:
    """One generated example with its full ground truth."""

    clip: MotionClip
    features: np.ndarray
    transcript: list[TranscriptWord]
    speaker_id: int
    bpm: float
    beat_times: np.ndarray
    semantic_spans: list[dict]  # {word_range, template, frame span, latent span}


@dataclass
class SyntheticCorpus:
    config: SyntheticCorpusConfig
    skeleton: Skeleton
    clips: list[CorpusClip]


def _speaker_style(base_seed: int, speaker_id: int) -> dict:
    r = np.random.default_rng((base_seed, 101, speaker_id))
    return {
        "amp_shoulder": r.uniform(0.3, 0.55),
        "amp_elbow": r.uniform(0.15, 0.35),
        "amp_spine": r.uniform(0.05, 0.14),
        "sway_hz": r.uniform(0.07, 0.16),
        "sway_amp": r.uniform(0.03, 0.08),
        "phase": r.uniform(0, 2 * np.pi),
    }


def _base_angles(
    cfg: SyntheticCorpusConfig, skeleton: Skeleton, style: dict, bpm: float, n_frames: int
) -> np.ndarray:
    """Beat-locked swing angles (radians), (L, J, 3) in xyz order.

    The swing position is (-1)^k * cos(pi * frac) of the beat phase, whose
    velocity vanishes exactly on each beat; that is what the motion-beat
    detector recovers.
    """
    t = np.arange(n_frames) / cfg.fps
    phase = t * bpm / 60.0
    k = np.floor(phase)
    frac = phase - k
    swing = np.where(k.astype(int) % 2 == 0, 1.0, -1.0) * np.cos(np.pi * frac)
    sway = np.sin(2 * np.pi * style["sway_hz"] * t + style["phase"])
    idx = {n: i for i, n in enumerate(skeleton.joint_names)}
    ang = np.zeros((n_frames, skeleton.joint_count, 3))
    if "l_shoulder" in idx:
        ang[:, idx["l_shoulder"], 0] = style["amp_shoulder"] * swing
    if "r_shoulder" in idx:
        ang[:, idx["r_shoulder"], 0] = -style["amp_shoulder"] * swing
    if "l_elbow" in idx:
        ang[:, idx["l_elbow"], 0] = style["amp_elbow"] * (0.5 + 0.5 * swing)
    if "r_elbow" in idx:
        ang[:, idx["r_elbow"], 0] = style["amp_elbow"] * (0.5 - 0.5 * swing)
    if "spine" in idx:
        ang[:, idx["spine"], 2] = style["amp_spine"] * swing
    if "chest" in idx:
        ang[:, idx["chest"], 1] = style["sway_amp"] * sway
    return ang


def _blend_rotations(base: np.ndarray, overlay: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Geodesic blend of two (L, J, 3, 3) rotation stacks with weights (L,)."""
    L, J = base.shape[:2]
    rb = Rotation.from_matrix(base.reshape(L * J, 3, 3))
    ro = Rotation.from_matrix(overlay.reshape(L * J, 3, 3))
    rel = (rb.inv() * ro).as_rotvec()
    w_full = np.repeat(w, J)[:, None]
    out = rb * Rotation.from_rotvec(rel * w_full)
    return out.as_matrix().reshape(L, J, 3, 3)


def rhythm_features(
    descriptor: dict, feature_dim: int = 16
) -> np.ndarray:
    """Per-latent-frame pseudo-audio features for a clip descriptor.

    Layout: [sin, cos of beat phase, beat-pulse energy, speaker one-hot...]
    zero-padded to feature_dim. descriptor keys: duration_seconds, bpm,
    speaker_id, speaker_count, fps (default 30), downsample (default 4).
    """
    fps = descriptor.get("fps", 30.0)
    down = descriptor.get("downsample", 4)
    n_frames = int(round(descriptor["duration_seconds"] * fps))
    n_latent = int(np.ceil(n_frames / down))
    centers = (np.arange(n_latent) * down + (down - 1) / 2.0) / fps
    phase = centers * descriptor["bpm"] / 60.0
    frac = phase - np.floor(phase)
    pulse = np.exp(-((np.minimum(frac, 1.0 - frac) * 4.0) ** 2))
    speaker_count = descriptor.get("speaker_count", 1)
    one_hot = np.zeros((n_latent, speaker_count))
    one_hot[:, descriptor["speaker_id"] % speaker_count] = 1.0
    cols = [np.sin(2 * np.pi * phase), np.cos(2 * np.pi * phase), pulse]
    feats = np.concatenate([np.stack(cols, axis=1), one_hot], axis=1)
    if feats.shape[1] > feature_dim:
        raise ValueError(
            f"feature_dim {feature_dim} too small for {feats.shape[1]} channels"
        )
    out = np.zeros((n_latent, feature_dim), dtype=np.float32)
    out[:, : feats.shape[1]] = feats
    return out


class AudioFeatureProvider:
    """Pluggable audio-feature seam; real extractors implement this."""

    name = "abstract"
    feature_dim = 0

    def features(self, descriptor: dict) -> np.ndarray:
        raise NotImplementedError


class SyntheticRhythmProvider(AudioFeatureProvider):
    """Beat-phase/energy/speaker features of the synthetic corpus."""

    name = "synthetic-rhythm"

    def __init__(self, feature_dim: int = 16):
        self.feature_dim = feature_dim

    def features(self, descriptor: dict) -> np.ndarray:
        return rhythm_features(descriptor, self.feature_dim)


def align_transcript(words: list[str], durations: list[float]) -> list[TranscriptWord]:
    """Assign cumulative start/end times to words from their durations."""
    if len(words) != len(durations):
        raise ValueError(f"{len(words)} words but {len(durations)} durations")
    out = []
    t = 0.0
    for w, d in zip(words, durations):
        if d <= 0:
            raise ValueError(f"word {w!r} has non-positive duration {d}")
        out.append(TranscriptWord(w, t, t + d))
        t += d
    return out


def _generate_clip(
    cfg: SyntheticCorpusConfig,
    skeleton: Skeleton,
    templates: dict[str, MotionClip],
    rng: np.random.Generator,
) -> CorpusClip:
    n_frames = int(round(cfg.clip_seconds * cfg.fps))
    speaker_id = int(rng.integers(0, cfg.speaker_count))
    bpm = float(rng.uniform(*cfg.bpm_range))
    style = _speaker_style(cfg.seed, speaker_id)
    angles = _base_angles(cfg, skeleton, style, bpm, n_frames)
    base = euler_to_rotation_matrices(angles, skeleton, cfg.fps).frames

    # Transcript: fillers at speech-ish durations covering the clip.
    words, durations = [], []
    total = 0.0
    while total < cfg.clip_seconds - 0.25:
        d = float(rng.uniform(0.25, 0.55))
        d = min(d, cfg.clip_seconds - total)
        words.append(str(rng.choice(FILLER_WORDS)))
        durations.append(d)
        total += d

    spans: list[dict] = []
    frames = base
    if words and rng.random() < cfg.insertion_rate:
        name = str(rng.choice(sorted(templates)))
        tclip = templates[name]
        lt = tclip.length
        lo_frame_max = n_frames - lt - 4
        if lo_frame_max > 4:
            f0 = int(rng.integers(4, lo_frame_max))
            transcript_tmp = align_transcript(words, durations)
            widx = int(
                np.argmin([abs(w.start - f0 / cfg.fps) for w in transcript_tmp])
            )
            words[widx] = str(tclip.meta.get("keyword", GESTURE_TEMPLATES[name]["keywords"][0]))
            f0 = int(round(transcript_tmp[widx].start * cfg.fps))
            f0 = min(max(f0, 0), n_frames - lt)
            w = np.ones(lt)
            ramp = min(4, lt // 4)
            if ramp:
                w[:ramp] = np.linspace(0.0, 1.0, ramp + 1)[1:]
                w[-ramp:] = np.linspace(1.0, 0.0, ramp + 1)[1:]
            frames = frames.copy()
            frames[f0 : f0 + lt] = _blend_rotations(
                frames[f0 : f0 + lt], tclip.frames, w
            )
            down = cfg.downsample
            spans.append(
                {
                    "word_range": [widx, widx],
                    "template": name,
                    "frame_span": [f0, f0 + lt],
                    "latent_span": [f0 // down, -(-(f0 + lt) // down)],
                }
            )

    transcript = align_transcript(words, durations)
    clip = MotionClip(skeleton, cfg.fps, frames)
    beat_period = 60.0 / bpm
    beat_times = np.arange(beat_period, cfg.clip_seconds - 1e-9, beat_period)
    descriptor = {
        "duration_seconds": cfg.clip_seconds,
        "bpm": bpm,
        "speaker_id": speaker_id,
        "speaker_count": cfg.speaker_count,
        "fps": cfg.fps,
        "downsample": cfg.downsample,
    }
    features = rhythm_features(descriptor, cfg.feature_dim)
    return CorpusClip(clip, features, transcript, speaker_id, bpm, beat_times, spans)


def generate_synthetic_corpus(cfg: SyntheticCorpusConfig) -> SyntheticCorpus:
    """Generate the full paired corpus, bit-reproducible from cfg.seed."""
    skeleton = default_skeleton(cfg.joint_count)
    templates = {
        name: render_template(name, skeleton, cfg.fps) for name in GESTURE_TEMPLATES
    }
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_clips)
    clips = [
        _generate_clip(cfg, skeleton, templates, np.random.default_rng(s))
        for s in seeds
    ]
    return SyntheticCorpus(cfg, skeleton, clips)


# ---------------------------------------------------------------------------
# Corpus directory layout
# ---------------------------------------------------------------------------


def save_corpus(corpus: SyntheticCorpus, out_dir: str | Path) -> None:
    """One motion/transcript/feature/metadata file per clip plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, item in enumerate(corpus.clips):
        stem = f"clip_{i:04d}"
        save_motion(item.clip, out / f"{stem}.motion.json")
        save_transcript(item.transcript, out / f"{stem}.transcript.json")
        np.save(out / f"{stem}.features.npy", item.features)
        meta = {
            "speaker_id": item.speaker_id,
            "bpm": item.bpm,
            "beat_times": item.beat_times.tolist(),
            "semantic_spans": item.semantic_spans,
        }
        (out / f"{stem}.meta.json").write_text(json.dumps(meta, indent=2))
    manifest = {
        "format": "gesturegen-corpus",
        "version": 1,
        "config": asdict(corpus.config),
        "n_clips": len(corpus.clips),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_corpus(corpus_dir: str | Path) -> SyntheticCorpus:
    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "gesturegen-corpus":
        raise ValueError(f"{corpus_dir}: not a corpus directory")
    cfg_dict = dict(manifest["config"])
    cfg_dict["bpm_range"] = tuple(cfg_dict["bpm_range"])
    cfg = SyntheticCorpusConfig(**cfg_dict)
    skeleton = default_skeleton(cfg.joint_count)
    clips = []
    for i in range(manifest["n_clips"]):
        stem = f"clip_{i:04d}"
        clip = load_motion(root / f"{stem}.motion.json")
        transcript = load_transcript(root / f"{stem}.transcript.json")
        features = np.load(root / f"{stem}.features.npy")
        meta = json.loads((root / f"{stem}.meta.json").read_text())
        clips.append(
            CorpusClip(
                clip, features, transcript, meta["speaker_id"], meta["bpm"],
                np.asarray(meta["beat_times"]), meta["semantic_spans"],
            )
        )
    return SyntheticCorpus(cfg, skeleton, clips)
