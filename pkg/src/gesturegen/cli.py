"""Command-line entry points for the full pipeline.

Commands: gen-corpus, train-vqvae, train-diffusion, build-db, sample,
evaluate. Each takes --config/--seed/--out, writes machine-readable reports
(JSON + CSV) and figures into the output directory, and prints a short
human summary. Any module error exits nonzero with the message.
"""

from __future__ import annotations

import functools
import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import diffusion as diff
from . import metrics as met
from . import reporting as rep
from .config import ConfigError, RunConfig, config_echo, load_config
from .injection import default_sigma
from .motion import MotionClip, load_motion, validate_rotations
from .pipeline import (
    SampleRequest,
    corpus_to_diffusion_dataset,
    parameter_hash,
    resolve_plan,
    run_sampling,
)
from .semantics import (
    GestureDatabase,
    client_from_env,
    load_database,
    load_transcript,
    save_database,
    save_plan,
)
from .synthesis import (
    SyntheticCorpus,
    SyntheticCorpusConfig,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    template_catalog,
)
from .vqvae import (
    TrainingDiverged,
    VqvaeConfig,
    load_vqvae,
    reconstruction_mse,
    save_vqvae,
    train_vqvae,
)
from .semantics import build_database


def _common_options(fn):
    @click.option("--config", "config_path", required=True, type=click.Path(), help="Run config document (YAML).")
    @click.option("--seed", type=int, default=None, help="Override the config seed.")
    @click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
    @functools.wraps(fn)
    def wrapper(config_path, seed, out_dir, **kwargs):
        try:
            cfg = load_config(config_path, seed_override=seed)
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            fn(cfg, out, **kwargs)
        except TrainingDiverged as exc:
            raise click.ClickException(f"training diverged: {exc}") from exc
        except (ConfigError, ValueError, OSError) as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


@click.group()
def main():
    """Co-speech gesture synthesis pipeline."""


@main.command("gen-corpus")
@_common_options
def gen_corpus(cfg: RunConfig, out: Path):
    """Generate the synthetic paired corpus."""
    d = cfg.data
    corpus_cfg = SyntheticCorpusConfig(
        n_clips=d.n_clips, clip_seconds=d.clip_seconds, bpm_range=d.bpm_range,
        joint_count=d.joint_count, speaker_count=d.speaker_count,
        insertion_rate=d.insertion_rate, feature_dim=d.feature_dim,
        fps=d.fps, seed=cfg.seed,
    )
    corpus = generate_synthetic_corpus(corpus_cfg)
    save_corpus(corpus, out)
    n_spans = sum(len(c.semantic_spans) for c in corpus.clips)
    rep.write_report_json(
        {"command": "gen-corpus", "n_clips": len(corpus.clips),
         "n_semantic_spans": n_spans, "config": config_echo(cfg)},
        out / "report.json",
    )
    click.echo(f"gen-corpus: wrote {len(corpus.clips)} clips ({n_spans} semantic spans) to {out}")


@main.command("train-vqvae")
@_common_options
def cmd_train_vqvae(cfg: RunConfig, out: Path):
    """Train the motion autoencoder on a corpus."""
    corpus = load_corpus(cfg.require("data", "corpus_dir"))
    v = cfg.vqvae
    vq_cfg = VqvaeConfig(
        latent_dim=v.latent_dim, codebook_size=v.codebook_size, hidden=v.hidden,
        fps=cfg.data.fps, alpha_vel=v.alpha_vel, alpha_acc=v.alpha_acc,
        lr=v.lr, epochs=v.epochs, batch_size=v.batch_size, seed=cfg.seed,
    )
    model, history = train_vqvae([c.clip for c in corpus.clips], vq_cfg)
    mse = reconstruction_mse(model, [c.clip for c in corpus.clips])
    ckpt = out / "vqvae.pt"
    save_vqvae(model, history, ckpt)
    rep.write_history_csv(history, out / "vqvae_history.csv")
    rep.save_loss_curve(history, out / "vqvae_loss.png", "autoencoder training loss")
    rep.write_report_json(
        {"command": "train-vqvae", "checkpoint": str(ckpt), "final_mse": mse,
         "parameter_hash": parameter_hash(model.net), "epochs": len(history),
         "config": config_echo(cfg)},
        out / "report.json",
    )
    click.echo(f"train-vqvae: final reconstruction MSE {mse:.3e}, checkpoint {ckpt}")


@main.command("train-diffusion")
@_common_options
def cmd_train_diffusion(cfg: RunConfig, out: Path):
    """Train the denoiser (pre-train, then optional fine-tune)."""
    vqvae, _ = load_vqvae(cfg.require("vqvae", "checkpoint"))
    ds = cfg.diffusion
    pretrain_dir = ds.pretrain_corpus or cfg.require("data", "corpus_dir")
    model_cfg = diff.DenoiserConfig(
        latent_dim=vqvae.latent_dim, d_model=ds.d_model, n_layers=ds.n_layers,
        n_heads=ds.n_heads, ff_dim=ds.ff_dim, audio_dim=cfg.data.feature_dim,
        speaker_count=cfg.data.speaker_count,
    )

    def phase_config(epochs):
        return diff.DiffusionTrainConfig(
            steps=ds.steps, beta_start=ds.beta_start, beta_end=ds.beta_end,
            lr=ds.lr, epochs=epochs, batch_size=ds.batch_size,
            p_uncond=ds.p_uncond, seed=cfg.seed, model=model_cfg,
        )

    report: dict = {"command": "train-diffusion", "phases": []}
    dataset = corpus_to_diffusion_dataset(load_corpus(pretrain_dir), vqvae)
    model, schedule, history = diff.train_diffusion(
        dataset, phase_config(ds.pretrain_epochs or ds.epochs)
    )
    pre_hash = parameter_hash(model.net)
    report["phases"].append(
        {"phase": "pretrain", "corpus": str(pretrain_dir),
         "epochs": len(history), "parameter_hash": pre_hash}
    )
    if ds.finetune_corpus:
        diff.save_diffusion(model, phase_config(len(history)), history, out / "diffusion_pretrain.pt")
        ft_dataset = corpus_to_diffusion_dataset(load_corpus(ds.finetune_corpus), vqvae)
        model, schedule, ft_history = diff.train_diffusion(
            ft_dataset, phase_config(ds.finetune_epochs or ds.epochs), init_model=model
        )
        report["phases"].append(
            {"phase": "finetune", "corpus": str(ds.finetune_corpus),
             "epochs": len(ft_history), "init_parameter_hash": pre_hash,
             "parameter_hash": parameter_hash(model.net)}
        )
        history = history + [h | {"epoch": h["epoch"] + len(history)} for h in ft_history]
    ckpt = out / "diffusion.pt"
    diff.save_diffusion(model, phase_config(len(history)), history, ckpt)
    rep.write_history_csv(history, out / "diffusion_history.csv")
    rep.save_loss_curve(history, out / "diffusion_loss.png", "denoiser training loss")
    report |= {"checkpoint": str(ckpt), "final_loss": history[-1]["loss"],
               "config": config_echo(cfg)}
    rep.write_report_json(report, out / "report.json")
    click.echo(f"train-diffusion: final loss {history[-1]['loss']:.4f}, checkpoint {ckpt}")


@main.command("build-db")
@_common_options
def cmd_build_db(cfg: RunConfig, out: Path):
    """Build the semantic gesture database from the built-in templates."""
    vqvae, _ = load_vqvae(cfg.require("vqvae", "checkpoint"))
    db = build_database(template_catalog(vqvae.skeleton, vqvae.config.fps), vqvae)
    path = out / "database.json"
    save_database(db, path)
    rep.write_report_json(
        {"command": "build-db", "database": str(path), "n_entries": len(db),
         "entries": sorted(db.entries), "config": config_echo(cfg)},
        out / "report.json",
    )
    click.echo(f"build-db: {len(db)} entries -> {path}")


@main.command("sample")
@_common_options
def cmd_sample(cfg: RunConfig, out: Path):
    """Sample motion clips; routes through the long-sequence path as needed."""
    vqvae, _ = load_vqvae(cfg.require("vqvae", "checkpoint"))
    model, train_cfg, _ = diff.load_diffusion(
        cfg.require("diffusion", "checkpoint"), expect_latent_dim=vqvae.latent_dim
    )
    schedule = diff.make_linear_schedule(
        cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end
    )
    db = load_database(cfg.injection.database) if cfg.injection.database else None
    transcript = (
        load_transcript(cfg.injection.transcript) if cfg.injection.transcript else None
    )
    request = SampleRequest(
        duration_seconds=cfg.long.duration_seconds, bpm=cfg.sample.bpm,
        speaker_id=cfg.sample.speaker_id, seed=cfg.seed,
        guidance_scale=cfg.diffusion.guidance_scale,
        window=cfg.long.window, overlap=cfg.long.overlap,
        k_fraction=cfg.injection.k_fraction,
        sigma_perturb=cfg.injection.sigma_perturb,
        noise_matching=cfg.injection.noise_matching,
        transcript=transcript,
        feature_dim=cfg.data.feature_dim, speaker_count=cfg.data.speaker_count,
        fps=cfg.data.fps,
    )
    down = vqvae.downsample
    latent_length = int(np.ceil(round(request.duration_seconds * request.fps) / down))
    request.plan = resolve_plan(
        request, db, latent_length, request.fps / down, client_from_env()
    )
    beats_map: dict[str, list[float]] = {}
    used_long = False
    for i in range(cfg.sample.n_samples):
        request.seed = cfg.seed + i
        result = run_sampling(vqvae, model, schedule, request, db)
        stem = f"sample_{i:04d}"
        from .motion import save_motion

        save_motion(result.motion, out / f"{stem}.motion.json")
        beats_map[stem] = result.audio_beats.times.tolist()
        used_long = result.used_long_path
        if i == 0:
            save_plan(result.plan, result.mask, out / "plan.json")
            rep.save_mask_figure(result.mask, out / "mask.png")
    (out / "beats.json").write_text(json.dumps(beats_map, indent=2))
    rep.write_report_json(
        {"command": "sample", "n_samples": cfg.sample.n_samples,
         "duration_seconds": request.duration_seconds,
         "latent_length": latent_length, "long_path": used_long,
         "plan_spans": len(request.plan.spans), "config": config_echo(cfg)},
        out / "report.json",
    )
    click.echo(
        f"sample: {cfg.sample.n_samples} clip(s) of {request.duration_seconds:.1f}s "
        f"({'long' if used_long else 'windowed'} path, {len(request.plan.spans)} injected spans)"
    )


def _load_motion_dir(path: Path) -> tuple[list[str], list[MotionClip]]:
    files = sorted(path.glob("*.motion.json"))
    if not files:
        raise ConfigError(f"no motion files in {path}")
    stems = [f.name.replace(".motion.json", "") for f in files]
    return stems, [load_motion(f) for f in files]


@main.command("evaluate")
@_common_options
def cmd_evaluate(cfg: RunConfig, out: Path):
    """Compute the metric suite over real and generated motion directories."""
    vqvae, _ = load_vqvae(cfg.require("vqvae", "checkpoint"))
    real_dir = Path(cfg.require("eval", "real_dir"))
    gen_dir = Path(cfg.require("eval", "gen_dir"))
    real_stems, real_clips = _load_motion_dir(real_dir)
    gen_stems, gen_clips = _load_motion_dir(gen_dir)
    for clip in real_clips + gen_clips:
        if clip.skeleton.joint_count != vqvae.skeleton.joint_count:
            raise ConfigError(
                f"skeleton mismatch: clip has {clip.skeleton.joint_count} joints, "
                f"model expects {vqvae.skeleton.joint_count}"
            )
    e = cfg.eval
    metrics: dict = {}
    metrics["fgd"] = met.fgd(
        met.extract_features(real_clips, vqvae), met.extract_features(gen_clips, vqvae)
    )

    beat_lookup: dict | None = None
    if e.beats_file:
        beat_lookup = json.loads(Path(e.beats_file).read_text())
    bc_values = []
    for stem, clip in zip(gen_stems, gen_clips):
        if beat_lookup is None:
            meta = real_dir / f"{stem}.meta.json"
            times = json.loads(meta.read_text())["beat_times"] if meta.exists() else None
        elif isinstance(beat_lookup, dict) and stem in beat_lookup:
            times = beat_lookup[stem]
        else:
            times = beat_lookup.get("beats") if isinstance(beat_lookup, dict) else beat_lookup
        if times:
            bc_values.append(
                met.beat_consistency(met.BeatTrack(np.asarray(times)), clip, e.sigma_bc)
            )
    if not bc_values:
        raise ConfigError("no audio beats available; set eval.beats_file")
    metrics["bc"] = float(np.mean(bc_values))

    metrics["diversity"] = met.diversity(gen_clips)

    if e.srgr_enabled:
        pairs = [
            (g, r, rs)
            for (g, r, rs) in zip(gen_clips, real_clips, real_stems)
            if g.length == r.length
        ]
        if pairs:
            values = []
            for g, r, rs in pairs:
                spans = []
                meta = real_dir / f"{rs}.meta.json"
                if meta.exists():
                    spans = [
                        tuple(s["frame_span"])
                        for s in json.loads(meta.read_text()).get("semantic_spans", [])
                    ]
                values.append(met.srgr(g, r, spans, e.srgr_weight, e.srgr_threshold))
            # Advisory metric: ground-truth pairing is positional, see README.
            metrics["srgr"] = float(np.mean(values))

    invalid = sum(len(validate_rotations(c)) for c in gen_clips)
    metrics["invalid_rotations"] = invalid
    rep.write_metrics_csv(metrics, out / "metrics.csv")
    rep.save_metrics_figure(metrics, out / "metrics.png")
    rep.write_report_json(
        {"command": "evaluate", **metrics,
         "n_real": len(real_clips), "n_gen": len(gen_clips),
         "config": config_echo(cfg)},
        out / "report.json",
    )
    summary = ", ".join(f"{k}={v:.4g}" for k, v in metrics.items())
    click.echo(f"evaluate: {summary}")


if __name__ == "__main__":
    main()
