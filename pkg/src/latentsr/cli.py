"""Command-line entry point: the full workflow as eight subcommands.

Pipeline order is synth-data -> train-vae -> pretrain-align -> finetune ->
infer / eval / daam, with ablate as a self-contained comparison harness on
top. Checkpoint directories are self-describing (parameters + config.json +
stage marker), so every downstream command rebuilds the exact architecture
it was trained with; flags override the config file, which overrides
defaults. Every command re-verifies what it just wrote before exiting 0.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .config import ConfigError, ModelConfig, config_help
from .degrade import VOCAB, build_dataset, decode_caption, encode_caption, load_manifest
from .evaluate import compute_daam, run_eval
from .fileio import load_tensor, save_ppm, save_tensor
from .pipeline import restore
from .schedule import GuidanceConfig, NoiseSchedule
from .train import (
    build_models,
    load_model_groups,
    load_models,
    params_digest,
    prepare_training_data,
    run_joint_stages,
    run_stage,
    run_two_stage,
    save_models,
)
from .vae import Vae, pretrain_vae

__all__ = ["main", "build_parser"]

_STAGE_FILE = "stage.txt"
_CONFIG_FILE = "config.json"


class CliError(RuntimeError):
    """User-facing failure; main() prints it and exits 1."""


# -- checkpoint directories ------------------------------------------------------


def _write_checkpoint(path: Path, models, cfg: ModelConfig, stage: str,
                      log_lines=None) -> None:
    save_models(models, path)
    cfg.save(path / _CONFIG_FILE)
    (path / _STAGE_FILE).write_text(stage + "\n", encoding="ascii")
    if log_lines:
        (path / "log.txt").write_text("\n".join(log_lines) + "\n", encoding="ascii")
    # self-check: the checkpoint must reload to the exact bytes just trained
    reread = _read_checkpoint(path, cfg_override=cfg)[0]
    if params_digest(reread.named_all()) != params_digest(models.named_all()):
        raise CliError(f"checkpoint self-check failed: reload of {path} differs")


def _checkpoint_stage(path: Path) -> str:
    marker = path / _STAGE_FILE
    if not marker.exists():
        raise CliError(f"{path} is not a checkpoint directory (no {_STAGE_FILE})")
    return marker.read_text(encoding="ascii").strip()


def _build_from_cfg(cfg: ModelConfig):
    vae = Vae(rngmod.stream(cfg.seed, "vae-init"), c_pen=cfg.c_pen,
              c_lat=cfg.c_lat, base=cfg.unet_base)
    return build_models(cfg, vae, vocab_size=len(VOCAB))


# groups actually trained by train-vae; alignment is still at init there, so
# consumers rebuild it per the active ablation instead of loading it
_BASE_GROUPS = ("vae", "lq_encoder", "unet", "text")


def _read_checkpoint(path: Path, cfg_override: ModelConfig | None = None):
    """Rebuild models from a checkpoint directory; returns (models, cfg)."""
    cfg = cfg_override
    if cfg is None:
        cfg_path = path / _CONFIG_FILE
        if not cfg_path.exists():
            raise CliError(f"{path} has no {_CONFIG_FILE}; cannot rebuild the architecture")
        cfg = ModelConfig.load(cfg_path)
    models = _build_from_cfg(cfg)
    load_models(models, path)
    return models, cfg


def _require_checkpoint(arg: str | None, expected: tuple, command: str, hint: str):
    if not arg:
        raise CliError(f"{command} needs --from-checkpoint; {hint}")
    path = Path(arg)
    if not path.is_dir():
        raise CliError(f"no checkpoint at {path}; {hint}")
    stage = _checkpoint_stage(path)
    if expected and stage not in expected:
        raise CliError(
            f"{command} expects a checkpoint from {' or '.join(expected)}, "
            f"found one from {stage!r} at {path}; {hint}"
        )
    return path


def _require_manifest(arg: str | None, command: str):
    if not arg:
        raise CliError(f"{command} needs --data pointing at a dataset manifest; "
                       "run synth-data first")
    path = Path(arg)
    if not path.exists():
        raise CliError(f"no dataset manifest at {path}; run synth-data first")
    return path


# -- config assembly ---------------------------------------------------------------

_FLAG_KEYS = ("seed", "steps", "cfg_scale", "batch", "vae_iters", "prior_iters",
              "align_iters", "joint_iters", "ablation")


def _resolve_config(args, checkpoint: Path | None = None) -> ModelConfig:
    """defaults < checkpoint config < --config file < individual flags."""
    if getattr(args, "config", None):
        cfg = ModelConfig.load(args.config)
    elif checkpoint is not None and (checkpoint / _CONFIG_FILE).exists():
        cfg = ModelConfig.load(checkpoint / _CONFIG_FILE)
    else:
        cfg = ModelConfig()
    overrides = {k: getattr(args, k, None) for k in _FLAG_KEYS}
    return cfg.with_overrides(overrides)


def _out_dir(args, command: str) -> Path:
    if not getattr(args, "out", None):
        raise CliError(f"{command} needs --out")
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- subcommands ---------------------------------------------------------------------


def _cmd_synth_data(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, "synth-data")
    manifest = build_dataset(args.n, args.level, seed=cfg.seed, out_dir=out,
                             size=cfg.image_size, presets=cfg.degrade_presets)
    items = load_manifest(manifest)  # self-check: manifest parses back
    if len(items) != args.n:
        raise CliError(f"manifest self-check failed: {len(items)} items, expected {args.n}")
    print(f"wrote {len(items)} pairs to {manifest}")
    return 0


def _cmd_train_vae(args) -> int:
    cfg = _resolve_config(args)
    manifest = _require_manifest(args.data, "train-vae")
    out = _out_dir(args, "train-vae")
    items = load_manifest(manifest)
    if not items:
        raise CliError(f"{manifest} is empty; train-vae needs at least one HQ image")
    hq = np.stack([load_tensor(i["hq_path"]) for i in items])

    log: list = []
    vae = pretrain_vae(hq, cfg.seed, cfg.vae_iters, cfg.batch, cfg.lr_vae,
                       grad_clip=cfg.grad_clip, log=log,
                       c_pen=cfg.c_pen, c_lat=cfg.c_lat, base=cfg.unet_base)
    models = build_models(cfg, vae, vocab_size=len(VOCAB))
    data = prepare_training_data(manifest, vae)
    lines = [f"{i}, vae, {v!r}" for i, v in enumerate(log)]
    # denoiser prior on clean latents; the text table trains here and freezes
    lines += run_stage(models, data, sched=NoiseSchedule.linear(
        cfg.sched_t, cfg.beta_min, cfg.beta_max),
        cfg=cfg, stage="prior", iters=cfg.prior_iters, lr_other=cfg.lr_prior)
    _write_checkpoint(out, models, cfg, "train-vae", lines)
    print(f"wrote base checkpoint (vae + denoiser prior + text) to {out}")
    return 0


def _cmd_pretrain_align(args) -> int:
    base = _require_checkpoint(args.from_checkpoint, ("train-vae",),
                               "pretrain-align", "run train-vae first")
    manifest = _require_manifest(args.data, "pretrain-align")
    cfg = _resolve_config(args, checkpoint=base)
    models = _build_from_cfg(cfg)
    load_model_groups(models, base, _BASE_GROUPS)
    out = _out_dir(args, "pretrain-align")
    sched = NoiseSchedule.linear(cfg.sched_t, cfg.beta_min, cfg.beta_max)
    data = prepare_training_data(manifest, models.vae)
    frozen_before = params_digest({**models.unet.named_params(),
                                   **models.lq_encoder.named_params()})
    lines = run_stage(models, data, sched, cfg, "pretrain_align",
                      cfg.align_iters, lr_other=cfg.lr_align)
    frozen_after = params_digest({**models.unet.named_params(),
                                  **models.lq_encoder.named_params()})
    if frozen_before != frozen_after:
        raise CliError("freeze self-check failed: pretrain-align moved encoder/denoiser weights")
    _write_checkpoint(out, models, cfg, "pretrain-align", lines)
    print(f"wrote alignment checkpoint to {out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    if cfg.ablation == "wo_pretrain_align":
        expected = ("train-vae", "pretrain-align")
        hint = "run train-vae first"
    else:
        expected = ("pretrain-align",)
        hint = ("run pretrain-align first, or set ablation=wo_pretrain_align "
                "to fine-tune straight from the train-vae base")
    base = _require_checkpoint(args.from_checkpoint, expected, "finetune", hint)
    manifest = _require_manifest(args.data, "finetune")
    cfg = _resolve_config(args, checkpoint=base)
    models = _build_from_cfg(cfg)
    if _checkpoint_stage(base) == "train-vae":
        load_model_groups(models, base, _BASE_GROUPS)
    else:
        try:
            load_models(models, base)
        except KeyError as e:
            raise CliError(
                f"{e.args[0]}; the ablation key changes the alignment architecture, "
                "so rerun pretrain-align with the same key (or start from the "
                "train-vae base with ablation=wo_pretrain_align)"
            ) from e
    out = _out_dir(args, "finetune")
    sched = NoiseSchedule.linear(cfg.sched_t, cfg.beta_min, cfg.beta_max)
    data = prepare_training_data(manifest, models.vae)
    lines: list = []
    stages = run_joint_stages(cfg, models, data, sched, log=lines)
    _write_checkpoint(out, models, cfg, "finetune", lines)
    print(f"wrote fine-tuned checkpoint to {out} (stages: {', '.join(stages)})")
    return 0


_RESTORE_HINT = "run finetune first (train-vae -> pretrain-align -> finetune)"


def _cmd_infer(args) -> int:
    base = _require_checkpoint(args.from_checkpoint, (), "infer", _RESTORE_HINT)
    manifest = _require_manifest(args.data, "infer")
    models, cfg = _read_checkpoint(base)
    cfg = _resolve_config(args, checkpoint=base)
    out = _out_dir(args, "infer")
    items = load_manifest(manifest)
    if not 0 <= args.index < len(items):
        raise CliError(f"--index {args.index} outside dataset of {len(items)} items")
    item = items[args.index]
    lq = load_tensor(item["lq_path"])
    caption = encode_caption(item["caption_path"].read_text().split())
    sched = NoiseSchedule.linear(cfg.sched_t, cfg.beta_min, cfg.beta_max)
    sink = [] if args.capture_daam else None
    img, _ = restore(models, lq[None], [caption], sched, cfg.steps,
                     GuidanceConfig(scale=cfg.cfg_scale),
                     rngmod.spawn_item(cfg.seed, "infer-sampler", item["index"]),
                     daam_sink=sink)
    stem = f"restored_{item['index']:05d}"
    save_ppm(out / f"{stem}.ppm", ((img[0] + 1) / 2).transpose(1, 2, 0))
    save_tensor(out / f"{stem}.ftnsr", img[0])
    if sink is not None:
        for tok in caption:
            dm = compute_daam(sink, caption, tok, lq.shape[1:],
                              max_len=models.text.max_len)
            save_ppm(out / f"daam_{item['index']:05d}_tok{tok}.ppm", dm.map)
    if not (out / f"{stem}.ppm").exists():  # self-check
        raise CliError("infer self-check failed: output PPM missing")
    print(f"restored item {item['index']} ({' '.join(decode_caption(caption))}) -> {out / stem}.ppm")
    return 0


def _cmd_eval(args) -> int:
    base = _require_checkpoint(args.from_checkpoint, (), "eval", _RESTORE_HINT)
    manifest = _require_manifest(args.data, "eval")
    models, cfg = _read_checkpoint(base)
    cfg = _resolve_config(args, checkpoint=base)
    out = _out_dir(args, "eval")
    sched = NoiseSchedule.linear(cfg.sched_t, cfg.beta_min, cfg.beta_max)
    report = run_eval(models, manifest, sched, cfg.steps,
                      GuidanceConfig(scale=cfg.cfg_scale), seed=cfg.seed,
                      level=args.level or "", out_dir=out,
                      capture_daam=args.capture_daam)
    if not (out / "report.txt").exists():
        raise CliError("eval self-check failed: report.txt missing")
    if report.indices:
        print(f"{len(report.indices)} images: mean PSNR {report.mean_psnr:.3f} dB, "
              f"mean SSIM {report.mean_ssim:.4f} -> {out / 'report.txt'}")
    else:
        print(f"empty dataset; wrote empty report to {out / 'report.txt'}")
    return 0


def _cmd_daam(args) -> int:
    base = _require_checkpoint(args.from_checkpoint, (), "daam", _RESTORE_HINT)
    manifest = _require_manifest(args.data, "daam")
    models, cfg = _read_checkpoint(base)
    cfg = _resolve_config(args, checkpoint=base)
    out = _out_dir(args, "daam")
    sched = NoiseSchedule.linear(cfg.sched_t, cfg.beta_min, cfg.beta_max)
    guidance = GuidanceConfig(scale=cfg.cfg_scale)
    lines = []
    for item in load_manifest(manifest):
        lq = load_tensor(item["lq_path"])
        caption = encode_caption(item["caption_path"].read_text().split())
        sink: list = []
        restore(models, lq[None], [caption], sched, cfg.steps, guidance,
                rngmod.spawn_item(cfg.seed, "eval-sampler", item["index"]),
                daam_sink=sink)
        for tok in caption:
            dm = compute_daam(sink, caption, tok, lq.shape[1:],
                              max_len=models.text.max_len)
            save_ppm(out / f"daam_{item['index']:05d}_tok{tok}.ppm", dm.map)
            lines.append(f"{item['index']}, {tok}, {int(dm.degenerate)}\n")
    (out / "daam_report.txt").write_text("".join(lines), encoding="ascii")
    print(f"wrote {len(lines)} attribution maps to {out}")
    return 0


def _cmd_ablate(args) -> int:
    base = _require_checkpoint(args.from_checkpoint, ("train-vae",),
                               "ablate", "run train-vae first")
    manifest = _require_manifest(args.data, "ablate")
    val = Path(args.val) if args.val else None
    if val is None or not val.exists():
        raise CliError("ablate needs --val pointing at a held-out manifest; run synth-data first")
    out = _out_dir(args, "ablate")
    cfg = _resolve_config(args, checkpoint=base)
    sched = NoiseSchedule.linear(cfg.sched_t, cfg.beta_min, cfg.beta_max)
    guidance = GuidanceConfig(scale=cfg.cfg_scale)

    results = {}
    for label, ablation in (("full", "none"), (args.key, args.key)):
        run_cfg = cfg.with_overrides({"ablation": ablation})
        models = _build_from_cfg(run_cfg)
        load_model_groups(models, base, _BASE_GROUPS)
        data = prepare_training_data(manifest, models.vae)
        run_two_stage(run_cfg, models, data, sched)
        report = run_eval(models, val, sched, run_cfg.steps, guidance,
                          seed=run_cfg.seed, level=args.level or "",
                          out_dir=out / label)
        results[label] = report
        report.save(out / f"report_{label}.txt")

    full, abl = results["full"], results[args.key]
    comparison = (
        f"model, mean_psnr, mean_ssim\n"
        f"full, {full.mean_psnr!r}, {full.mean_ssim!r}\n"
        f"{args.key}, {abl.mean_psnr!r}, {abl.mean_ssim!r}\n"
        f"delta, {full.mean_psnr - abl.mean_psnr!r}, {full.mean_ssim - abl.mean_ssim!r}\n"
    )
    (out / "comparison.txt").write_text(comparison, encoding="ascii")
    print(comparison, end="")
    print(f"wrote comparison to {out / 'comparison.txt'}")
    return 0


# -- parser ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, checkpoint=False):
    p.add_argument("--config", help="JSON config file (see --help for keys)")
    p.add_argument("--seed", type=int, help="root seed; every substream derives from it")
    p.add_argument("--steps", type=int, help="sampler steps")
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, help="guidance scale")
    if checkpoint:
        p.add_argument("--from-checkpoint", help="checkpoint directory to start from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentsr",
        description="Latent-diffusion super-resolution on a procedural toy corpus.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render an HQ/LQ/caption dataset")
    _add_common(p)
    p.add_argument("--n", type=int, required=True, help="number of image pairs")
    p.add_argument("--level", choices=("I", "II", "III"), default="II")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train-vae", help="pretrain the frozen assets: VAE, denoiser prior, text table")
    _add_common(p)
    p.add_argument("--data", help="training manifest from synth-data")
    p.add_argument("--out", required=True, help="checkpoint directory")
    for key in ("vae_iters", "prior_iters", "batch"):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    p.set_defaults(func=_cmd_train_vae)

    p = sub.add_parser("pretrain-align", help="stage 1: train the alignment module only")
    _add_common(p, checkpoint=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--align-iters", dest="align_iters", type=int)
    p.set_defaults(func=_cmd_pretrain_align)

    p = sub.add_parser("finetune", help="stage 2: joint LQ-encoder + alignment + denoiser fine-tune")
    _add_common(p, checkpoint=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--joint-iters", dest="joint_iters", type=int)
    p.add_argument("--key", dest="ablation", help="ablation key (see config docs)")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("infer", help="restore one LQ image to PPM")
    _add_common(p, checkpoint=True)
    p.add_argument("--data")
    p.add_argument("--index", type=int, default=0, help="manifest item to restore")
    p.add_argument("--out", required=True)
    p.add_argument("--capture-daam", action="store_true",
                   help="also write per-token attribution maps")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="restore a whole manifest and write PSNR/SSIM report")
    _add_common(p, checkpoint=True)
    p.add_argument("--data")
    p.add_argument("--level", choices=("I", "II", "III"), default=None,
                   help="label recorded in the report")
    p.add_argument("--out", required=True)
    p.add_argument("--capture-daam", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("daam", help="write cross-attention attribution maps per caption token")
    _add_common(p, checkpoint=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_daam)

    p = sub.add_parser("ablate", help="train full vs one ablation from the same base; compare")
    _add_common(p, checkpoint=True)
    p.add_argument("--key", required=True,
                   choices=[k for k in ModelConfig._ABLATION_VALUES if k != "none"])
    p.add_argument("--data", help="training manifest")
    p.add_argument("--val", help="held-out manifest for the comparison")
    p.add_argument("--level", choices=("I", "II", "III"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, FileNotFoundError, KeyError, ValueError) as e:
        msg = e.args[0] if e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
