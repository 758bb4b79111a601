"""Command-line entry point: ``dualmotion <command> [--config FILE] [flags] --out DIR``.

Every command writes ``manifest.json`` into its output directory. The manifest records the fully
resolved config, so ``dualmotion replay DIR/manifest.json --out OTHER`` repeats the run and checks
that every artifact matches byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .archive import ArchiveError, dump_json, read_archive, write_archive
from .config import ConfigError, ExperimentConfig, load_config, override
from .evalkit import (appearance_score, dominant_hue, evaluate_run, motion_fidelity, net_displacement,
                      temporal_consistency)
from .lora import load_adapter_set
from .schedule import make_schedule
from .synthvid import PALETTE, SHAPES, SceneSpec, clip_from_spec, make_dataset, save_gif
from .text import tokenize
from .trainer import (DebiasConfig, NonFiniteLossError, TrainConfig, load_run, pretrain_base, save_run,
                      train_coupled, train_customization)
from .unet import build_unet, load_checkpoint, save_checkpoint

log = logging.getLogger("dualmotion")

COMMANDS = ("gen-data", "pretrain", "customize", "sample", "mix", "animate", "probe", "eval")
EXIT_MISMATCH, EXIT_INVALID, EXIT_NONFINITE = 1, 2, 3


class CommandError(RuntimeError):
    pass


# -- helpers ----------------------------------------------------------------------

def _schedule(cfg: ExperimentConfig):
    s = cfg.schedule
    return make_schedule(s.num_steps, s.beta_start, s.beta_end)


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    c = cfg.customize
    values = {f.name: getattr(c, f.name) for f in fields(TrainConfig)}
    values["adam_betas"] = tuple(values["adam_betas"])
    values["loss_weights"] = tuple(values["loss_weights"])
    return TrainConfig(**values)


def _require(value, what: str):
    if not value:
        raise CommandError(f"missing {what}")
    return value


def _load_base(cfg: ExperimentConfig):
    model = load_checkpoint(_require(cfg.paths.base, "paths.base (pass --base)"))
    model.eval()
    return model


def _clips(cfg: ExperimentConfig):
    d = cfg.data
    if d.clips:
        out = []
        for i, entry in enumerate(d.clips):
            entry = dict(entry)
            sid = entry.pop("source_id", None)
            prompt = entry.pop("prompt", None)
            clip = clip_from_spec(SceneSpec.from_dict(entry), d.frames, d.resolution, sid,
                                  d.with_motion_prompt)
            if prompt is not None:
                clip = clip._replace(prompt=tokenize(prompt))
            out.append(clip)
        return out
    if d.motion:
        pool = [tuple(p) for p in d.appearance_pool]
        return make_dataset(d.motion, d.n_videos, pool, cfg.seed, d.frames, d.resolution, d.speed,
                            size=d.size, with_motion_prompt=d.with_motion_prompt)
    raise CommandError("no training data: set data.clips or data.motion")


def _sample_seeds(cfg: ExperimentConfig) -> list[int]:
    if cfg.sample.seeds:
        return [int(s) for s in cfg.sample.seeds]
    return list(range(cfg.seed, cfg.seed + cfg.sample.num_samples))


def _prompt_targets(text: str) -> tuple[str | None, str | None]:
    words = text.split()
    color = next((w for w in words if w in PALETTE), None)
    shape = next((w for w in words if w in SHAPES), None)
    return color, shape


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return v


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _video_metrics(video, prompt_text: str, ref_motion: str) -> dict:
    color, shape = _prompt_targets(prompt_text)
    disp = net_displacement(video)
    row = {"hue": dominant_hue(video) or "none", "fidelity": motion_fidelity(video, ref_motion),
           "dx": float(disp[0]), "dy": float(disp[1]), "temporal_consistency": temporal_consistency(video)}
    if color and shape:
        app = appearance_score(video, color, shape)
        row.update(hue_match=bool(app.hue_match), shape_score=app.shape_match_score)
    return row


def _write_videos(out: Path, videos: torch.Tensor, seeds: list[int], prompt_text: str, cfg, title: str):
    from .plotting import plot_filmstrip

    write_archive(out / "videos", {"kind": "videos", "prompt": prompt_text, "seeds": seeds},
                  {"videos": videos.detach().cpu().float().numpy()})
    rows = []
    for seed, video in zip(seeds, videos):
        save_gif(video, out / "gifs" / f"seed_{seed:04d}.gif")
        rows.append({"seed": seed, **_video_metrics(video, prompt_text, cfg.eval.ref_motion)})
    _write_csv(out / "metrics.csv", rows)
    plot_filmstrip(videos, out / "filmstrip.svg", title)


def _load_image(path: str, resolution: int) -> torch.Tensor:
    p = Path(path)
    if p.is_dir():
        _, tensors = read_archive(p)
        arr = next(iter(tensors.values()))
        arr = arr.reshape(-1, *arr.shape[-3:])[0]
        return torch.from_numpy(arr.copy())
    from PIL import Image

    img = Image.open(p).convert("RGB").resize((resolution, resolution), Image.BICUBIC)
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 127.5 - 1.0)


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> None:
    clips = _clips(cfg)
    entries = []
    for clip in clips:
        sub = out / "clips" / clip.source_id
        write_archive(sub, {"kind": "clip", "source_id": clip.source_id, "prompt": clip.prompt.raw_text,
                            "spec": clip.spec.to_dict()}, {"video": clip.video.numpy()})
        save_gif(clip.video, out / "gifs" / f"{clip.source_id}.gif")
        entries.append({"source_id": clip.source_id, "prompt": clip.prompt.raw_text,
                        "spec": clip.spec.to_dict(), "path": f"clips/{clip.source_id}"})
    dump_json({"clips": entries}, out / "dataset.json")
    from .plotting import plot_filmstrip

    plot_filmstrip(torch.stack([c.video for c in clips]), out / "filmstrip.svg", "training clips")
    log.info("wrote %d clips", len(clips))


def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> None:
    from .plotting import plot_pretrain_loss

    model = build_unet(cfg.model, seed=cfg.seed)
    p = cfg.pretrain

    def progress(step, loss):
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, loss)

    losses = pretrain_base(model, _schedule(cfg), p, on_step=progress)
    save_checkpoint(model, out / "checkpoint", {"pretrain": asdict(p), "final_loss": losses[-1] if losses else None})
    _write_csv(out / "loss.csv", [{"step": i, "loss": v} for i, v in enumerate(losses)])
    plot_pretrain_loss(losses, out / "loss.svg")


def cmd_customize(cfg: ExperimentConfig, out: Path) -> None:
    from .plotting import plot_loss_history

    base = _load_base(cfg)
    clips = _clips(cfg)
    tcfg = _train_config(cfg)
    c = cfg.customize

    def progress(rec):
        if rec["step"] % 50 == 0:
            log.info("step %d %s", rec["step"], {k: round(v, 4) for k, v in rec.items() if k.startswith("l_")})

    if c.mode == "dual":
        run = train_customization(base, clips, tcfg, DebiasConfig(beta=c.beta), _schedule(cfg), c.steps, progress)
    elif c.mode == "coupled":
        run = train_coupled(base, clips, tcfg, _schedule(cfg), c.steps, progress)
    else:
        raise CommandError(f"unknown customize.mode {c.mode!r}")
    save_run(run, out / "run")
    plot_loss_history(run.loss_history, out / "loss.svg")


def cmd_sample(cfg: ExperimentConfig, out: Path) -> None:
    from .studio import generate

    base = _load_base(cfg)
    s = cfg.sample
    sets, scales = [], {"spatial": s.gamma_spatial, "temporal": s.gamma_temporal}
    if cfg.paths.run:
        run = load_run(cfg.paths.run, base)
        sets.append(run.temporal_set)
        if s.spatial_source:
            if s.spatial_source not in run.spatial_sets:
                raise CommandError(f"run has no spatial set {s.spatial_source!r}; "
                                   f"available: {sorted(run.spatial_sets)}")
            sets.append(run.spatial_sets[s.spatial_source])
    seeds = _sample_seeds(cfg)
    videos = generate(base, tokenize(s.prompt), sets, scales, seeds=seeds, frames=cfg.data.frames,
                      resolution=cfg.data.resolution, schedule=_schedule(cfg), steps=s.steps,
                      guidance_scale=s.guidance_scale)
    _write_videos(out, videos, seeds, s.prompt, cfg, s.prompt)


def _spatial_from(cfg: ExperimentConfig, base):
    path = _require(cfg.paths.spatial_run or cfg.paths.run, "paths.spatial_run (pass --spatial-run)")
    run = load_run(path, base)
    sid = cfg.sample.spatial_source or next(iter(sorted(run.spatial_sets)))
    if sid not in run.spatial_sets:
        raise CommandError(f"run has no spatial set {sid!r}; available: {sorted(run.spatial_sets)}")
    return run.spatial_sets[sid]


def _temporal_from(cfg: ExperimentConfig, base):
    path = _require(cfg.paths.temporal_run or cfg.paths.run, "paths.temporal_run (pass --temporal-run)")
    if (Path(path) / "run.json").exists():
        return load_run(path, base).temporal_set
    return load_adapter_set(path, base)


def cmd_mix(cfg: ExperimentConfig, out: Path) -> None:
    from .studio import mix_videos

    base = _load_base(cfg)
    s = cfg.sample
    seeds = _sample_seeds(cfg)
    videos = mix_videos(base, _spatial_from(cfg, base), _temporal_from(cfg, base), s.gamma_spatial,
                        s.gamma_temporal, tokenize(s.prompt), seeds=seeds, frames=cfg.data.frames,
                        resolution=cfg.data.resolution, schedule=_schedule(cfg), steps=s.steps,
                        guidance_scale=s.guidance_scale)
    _write_videos(out, videos, seeds, s.prompt, cfg, f"mix: {s.prompt}")


def cmd_animate(cfg: ExperimentConfig, out: Path) -> None:
    from .studio import animate_image

    base = _load_base(cfg)
    s = cfg.sample
    if cfg.paths.image:
        image = _load_image(cfg.paths.image, cfg.data.resolution)
    else:
        image = _clips(cfg)[0].video[0]
    seeds = _sample_seeds(cfg)
    videos = animate_image(base, image, _temporal_from(cfg, base), _train_config(cfg), tokenize(s.prompt),
                           train_steps=s.image_train_steps, gamma_s=s.gamma_spatial, gamma_t=s.gamma_temporal,
                           seeds=seeds, frames=cfg.data.frames, schedule=_schedule(cfg), steps=s.steps,
                           guidance_scale=s.guidance_scale)
    write_archive(out / "image", {"kind": "image"}, {"image": image.numpy()})
    _write_videos(out, videos, seeds, s.prompt, cfg, f"animate: {s.prompt}")


def cmd_probe(cfg: ExperimentConfig, out: Path) -> None:
    from .plotting import plot_probe
    from .studio import probe_latents

    clips = _clips(cfg)
    p = cfg.probe
    report = probe_latents([c.video for c in clips], p.t_grid, p.beta, _schedule(cfg),
                           labels=[c.source_id for c in clips], seed=cfg.seed, anchor=p.anchor)
    dump_json(report.to_dict(), out / "probe.json")
    rows = []
    for t, before, after in zip(report.t_grid, report.before, report.after):
        for stage, geo in (("raw", before), ("debiased", after)):
            d = geo["centroid_distances"]
            for i in range(len(clips)):
                for j in range(i + 1, len(clips)):
                    rows.append({"t": t, "stage": stage, "clip_a": report.labels[i], "clip_b": report.labels[j],
                                 "centroid_distance": float(d[i, j])})
    _write_csv(out / "probe.csv", rows)
    plot_probe(report, out / "probe.svg")


def cmd_eval(cfg: ExperimentConfig, out: Path) -> None:
    from .plotting import plot_eval_summary

    base = _load_base(cfg)
    run = load_run(_require(cfg.paths.run, "paths.run (pass --run)"), base)
    coupled = load_run(cfg.paths.coupled_run, base) if cfg.paths.coupled_run else None
    result = evaluate_run(base, run, cfg.eval, _schedule(cfg), coupled=coupled)
    _write_csv(out / "eval.csv", result["rows"])
    dump_json(result["summary"], out / "summary.json")
    if result["summary"]:
        plot_eval_summary(result["summary"], out / "summary.svg")


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "customize": cmd_customize, "sample": cmd_sample,
    "mix": cmd_mix, "animate": cmd_animate, "probe": cmd_probe, "eval": cmd_eval,
}


# -- flags, manifests, replay -----------------------------------------------------

def apply_flags(cfg: ExperimentConfig, command: str, args: argparse.Namespace) -> ExperimentConfig:
    """Fold command-line overrides into the config so the manifest alone reproduces the run."""
    if args.steps is not None:
        target = {"pretrain": cfg.pretrain, "customize": cfg.customize, "eval": cfg.eval}.get(command, cfg.sample)
        target.steps = args.steps
    override(cfg.sample, guidance_scale=args.guidance_scale, gamma_spatial=args.gamma_spatial,
             gamma_temporal=args.gamma_temporal)
    override(cfg.eval, guidance_scale=args.guidance_scale, gamma_spatial=args.gamma_spatial,
             gamma_temporal=args.gamma_temporal)
    override(cfg.paths, base=args.base, run=args.run, spatial_run=args.spatial_run,
             temporal_run=args.temporal_run, image=args.image)
    for name in ("base", "run", "spatial_run", "temporal_run", "coupled_run", "image"):
        value = getattr(cfg.paths, name)
        if value:
            setattr(cfg.paths, name, str(Path(value).resolve()))
    return cfg


def _hash_tree(out: Path) -> dict[str, str]:
    hashes = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p != out / "manifest.json":
            hashes[p.relative_to(out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return hashes


def run_command(command: str, cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    t0 = time.time()
    HANDLERS[command](cfg, out)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "torch_version": torch.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "elapsed_s": round(time.time() - t0, 3),
        "artifacts": _hash_tree(out),
    }
    dump_json(manifest, out / "manifest.json")
    return manifest


def replay(manifest_path: Path, out: Path) -> list[str]:
    """Re-run a recorded command into ``out``; return the artifacts whose bytes differ."""
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if manifest.get("command") not in HANDLERS:
        raise CommandError(f"{manifest_path}: not a run manifest")
    cfg = load_config(manifest_path)
    fresh = run_command(manifest["command"], cfg, out)["artifacts"]
    old = manifest["artifacts"]
    return sorted(k for k in set(old) | set(fresh) if old.get(k) != fresh.get(k))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualmotion", description="Motion customization with dual-path adapters.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML or JSON config (a run manifest also works)")
        p.add_argument("--preset", choices=("desk", "paper-scale"), default=None)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--steps", type=int, help="training steps (pretrain, customize) or sampling steps")
        p.add_argument("--guidance-scale", type=float)
        p.add_argument("--gamma-spatial", type=float)
        p.add_argument("--gamma-temporal", type=float)
        p.add_argument("--base", help="base model checkpoint directory")
        p.add_argument("--run", help="customization run directory")
        p.add_argument("--spatial-run")
        p.add_argument("--temporal-run")
        p.add_argument("--image", help="PNG file or tensor archive for animate")
    p = sub.add_parser("replay")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "replay":
            diff = replay(args.manifest, args.out)
            if diff:
                print(f"replay mismatch in {len(diff)} artifact(s): {', '.join(diff)}", file=sys.stderr)
                return EXIT_MISMATCH
            print("replay matched")
            return 0
        cfg = apply_flags(load_config(args.config, args.preset, args.seed), args.command, args)
        manifest = run_command(args.command, cfg, args.out)
        print(f"{args.command}: wrote {len(manifest['artifacts'])} artifact(s) to {args.out}")
        return 0
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (CommandError, ConfigError, ArchiveError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
