"""Run configuration: versioned YAML with strict schema validation.

Every command reads one document with command-specific sections. Unknown
sections or keys are rejected (no silent drift), the seed is mandatory, and
relative paths are resolved against the config file's directory before use.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

CONFIG_VERSION = 1

# Keys holding filesystem paths, resolved relative to the config file.
_PATH_KEYS = {
    "corpus_dir", "pretrain_corpus", "finetune_corpus", "checkpoint",
    "database", "transcript", "plan_file", "real_dir", "gen_dir", "beats_file",
}


class ConfigError(ValueError):
    """Raised for malformed or incomplete run configs."""


@dataclass
class DataSection:
    n_clips: int = 200
    clip_seconds: float = 12.0
    bpm_range: tuple[float, float] = (80.0, 140.0)
    joint_count: int = 12
    speaker_count: int = 4
    insertion_rate: float = 0.5
    feature_dim: int = 16
    fps: float = 30.0
    corpus_dir: str | None = None


@dataclass
class VqvaeSection:
    latent_dim: int = 64
    codebook_size: int = 512
    hidden: int = 64
    lr: float = 0.001
    epochs: int = 400
    batch_size: int = 16
    alpha_vel: float = 1.0
    alpha_acc: float = 1.0
    checkpoint: str | None = None


@dataclass
class DiffusionSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    lr: float = 0.0002
    epochs: int = 3000
    batch_size: int = 256
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    p_uncond: float = 0.1
    guidance_scale: float = 2.5
    pretrain_corpus: str | None = None
    finetune_corpus: str | None = None
    pretrain_epochs: int | None = None
    finetune_epochs: int | None = None
    checkpoint: str | None = None


@dataclass
class InjectionSection:
    k_fraction: float = 0.25
    sigma_perturb: float | None = None  # None -> 0.05 * mean latent std
    noise_matching: bool = True
    transcript: str | None = None
    database: str | None = None
    plan_file: str | None = None


@dataclass
class LongSection:
    window: int = 90
    overlap: int = 30
    duration_seconds: float = 12.0


@dataclass
class EvalSection:
    real_dir: str | None = None
    gen_dir: str | None = None
    beats_file: str | None = None
    sigma_bc: float = 0.1
    srgr_threshold: float = 0.1
    srgr_weight: float = 2.0
    srgr_enabled: bool = True


@dataclass
class SampleSection:
    n_samples: int = 1
    speaker_id: int = 0
    bpm: float = 110.0


@dataclass
class RunConfig:
    seed: int
    data: DataSection = field(default_factory=DataSection)
    vqvae: VqvaeSection = field(default_factory=VqvaeSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    injection: InjectionSection = field(default_factory=InjectionSection)
    long: LongSection = field(default_factory=LongSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sample: SampleSection = field(default_factory=SampleSection)

    def require(self, section: str, key: str):
        """Fetch a value that must be configured; names the key on failure."""
        value = getattr(getattr(self, section), key)
        if value is None:
            raise ConfigError(f"config key '{section}.{key}' is required for this command")
        return value


def _build_section(cls, raw: dict, section: str, base_dir: Path):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )
    kwargs = {}
    for key, value in raw.items():
        if key in _PATH_KEYS and isinstance(value, str):
            value = str((base_dir / value).resolve())
        if key == "bpm_range":
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | Path, seed_override: int | None = None) -> RunConfig:
    """Parse and validate a run config document."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    version = raw.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: expected 'version: {CONFIG_VERSION}', got {version!r}")
    seed = raw.pop("seed", None)
    if seed_override is not None:
        seed = seed_override
    if not isinstance(seed, int):
        raise ConfigError(f"{path}: mandatory integer 'seed' is missing")
    section_types = {
        f.name: f.default_factory for f in fields(RunConfig) if f.name != "seed"
    }
    unknown = set(raw) - set(section_types)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s): {', '.join(sorted(unknown))}")
    base_dir = path.parent
    sections = {}
    for name, factory in section_types.items():
        body = raw.get(name, {})
        if body is None:
            body = {}
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: section [{name}] must be a mapping")
        sections[name] = _build_section(type(factory()), body, name, base_dir)
    return RunConfig(seed=seed, **sections)


def config_echo(config: RunConfig) -> dict:
    """JSON-serializable copy of the resolved config for report documents."""

    def unwrap(obj):
        if is_dataclass(obj):
            return {f.name: unwrap(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return unwrap(config)
