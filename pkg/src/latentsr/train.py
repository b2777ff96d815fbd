"""Two-stage feature optimization: align-only pretraining, then joint
fine-tuning of LQ encoder + alignment + denoiser under the eps L1 loss.

Roles are split deliberately: the pretrained VAE stays frozen and supplies
the clean-latent targets x0 and the decoder, while the LQ encoder is a
separately-updated copy that starts from the same weights. The text table
is trained only in the prior stage (denoiser pretraining on clean latents)
and frozen afterwards.

Every stage seeds its own data/noise/dropout streams, so logs and final
parameters are bit-reproducible, and stage reruns are independent of call
order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .align import build_align
from .config import ModelConfig
from .degrade import encode_caption, load_manifest
from .denoiser import TextEmbedder, UNetDenoiser
from .fileio import load_checkpoint, load_tensor, save_checkpoint
from .nn import Module
from .optim import AdamW, clip_global_norm, cosine_lr
from .schedule import NoiseSchedule, forward_noise_batch, sample_timesteps
from .tensor import Tensor, abs_, mean, sub
from .vae import Vae, VaeEncoder

__all__ = [
    "Models",
    "TrainData",
    "build_models",
    "prepare_training_data",
    "loss_eq3",
    "run_stage",
    "run_joint_stages",
    "run_two_stage",
    "save_models",
    "load_models",
    "load_model_groups",
    "params_digest",
    "STAGES",
]

STAGES = ("prior", "pretrain_align", "joint", "joint_enc", "joint_dm")

_PREFIXES = ("vae", "lq_encoder", "align", "unet", "text")


@dataclass
class Models:
    """The five parameter groups of the full pipeline."""

    vae: Vae
    lq_encoder: VaeEncoder
    align: Module
    unet: UNetDenoiser
    text: TextEmbedder
    feature_tap: str = "penultimate"  # or "last": use x0-width features

    def groups(self):
        return {
            "vae": self.vae,
            "lq_encoder": self.lq_encoder,
            "align": self.align,
            "unet": self.unet,
            "text": self.text,
        }

    def named_all(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in self.groups().items():
            for name, p in mod.named_params().items():
                out[f"{prefix}.{name}"] = p
        return out


def build_models(cfg: ModelConfig, vae: Vae, vocab_size: int) -> Models:
    """Fresh alignment/denoiser/text modules around a pretrained VAE.

    The LQ encoder is a copy of the pretrained encoder (shared init); the
    ablation key may swap the alignment path or the feature tap.
    """
    base_vae = vae.encoder
    lq_encoder = VaeEncoder(
        rngmod.stream(cfg.seed, "lq-encoder-init"),
        c_pen=base_vae.c_pen, c_lat=base_vae.c_lat,
        base=base_vae.conv_in.weight.shape[0],
    )
    lq_encoder.load_state_dict(base_vae.state_dict())

    align_cfg = cfg
    tap = "penultimate"
    if cfg.ablation == "wo_align":
        align_cfg = cfg.with_overrides({"align": "add"})
    elif cfg.ablation == "last_feats":
        tap = "last"
        align_cfg = cfg.with_overrides({"c_pen": cfg.c_lat})
    align = build_align(align_cfg, rngmod.stream(cfg.seed, "align-init"))
    unet = UNetDenoiser(
        cfg.c_align, cfg.c_lat, rngmod.stream(cfg.seed, "unet-init"),
        base=cfg.unet_base, mult=cfg.unet_mult, heads=cfg.unet_heads,
        t_dim=cfg.t_dim, d_ctx=cfg.text_dim, ff_mult=cfg.ff_mult,
    )
    text = TextEmbedder(vocab_size, cfg.text_dim, cfg.text_len,
                        rngmod.stream(cfg.seed, "text-init"))
    return Models(vae=vae, lq_encoder=lq_encoder, align=align, unet=unet,
                  text=text, feature_tap=tap)


@dataclass
class TrainData:
    """In-memory training set with precomputed frozen-encoder latents."""

    hq: np.ndarray          # [N,3,H,W] in [-1,1]
    lq: np.ndarray          # [N,3,H,W]
    captions: list          # N token-id lists
    x0: np.ndarray          # [N,c_lat,h,w]

    def __len__(self):
        return self.hq.shape[0]


def prepare_training_data(manifest_path, vae: Vae, chunk: int = 16) -> TrainData:
    """Load a dataset manifest and encode HQ latents with the frozen VAE."""
    items = load_manifest(manifest_path)
    hq = np.stack([load_tensor(i["hq_path"]) for i in items])
    lq = np.stack([load_tensor(i["lq_path"]) for i in items])
    captions = [encode_caption(i["caption_path"].read_text().split()) for i in items]
    vae.set_trainable(False)
    x0_parts = []
    for start in range(0, len(items), chunk):
        feats = vae.encode(Tensor(hq[start : start + chunk]))
        x0_parts.append(feats.x0.data)
    x0 = np.concatenate(x0_parts) if x0_parts else np.zeros((0,), dtype=np.float32)
    return TrainData(hq=hq, lq=lq, captions=captions, x0=x0)


def _dropout_captions(captions, dropout_rng, p: float):
    if dropout_rng is None or p <= 0.0:
        return captions
    return [[] if dropout_rng.uniform() < p else c for c in captions]


def loss_eq3(batch: dict, models: Models, sched: NoiseSchedule,
             noise_rng: np.random.Generator,
             dropout_rng: np.random.Generator | None = None,
             dropout: float = 0.0, use_align: bool = True) -> Tensor:
    """Mean |eps - eps_hat| over one batch.

    With use_align=False (prior stage) the denoiser sees the noisy latent
    directly and the LQ branch never runs.
    """
    x0 = batch["x0"]
    b = x0.shape[0]
    t = sample_timesteps(noise_rng, b, sched.T)
    eps = noise_rng.standard_normal(x0.shape).astype(np.float32)
    x_t = forward_noise_batch(x0, eps, t, sched)
    if use_align:
        feats = models.lq_encoder(Tensor(batch["lq"]))
        f_feat = feats.f_lq if models.feature_tap == "penultimate" else feats.x0
        f_a = models.align(Tensor(x_t), f_feat)
    else:
        f_a = Tensor(x_t)
    caps = _dropout_captions(batch["captions"], dropout_rng, dropout)
    c = models.text.embed_batch(caps)
    eps_hat = models.unet.predict_eps(f_a, t, c)
    return mean(abs_(sub(eps_hat, Tensor(eps))))


def _stage_partition(stage: str, models: Models) -> tuple[dict, dict]:
    """(encoder-group, other-group) trainable parameter dicts for a stage."""
    if stage == "prior":
        trainable = {"unet", "text"}
    elif stage == "pretrain_align":
        trainable = {"align"}
    elif stage == "joint":
        trainable = {"lq_encoder", "align", "unet"}
    elif stage == "joint_enc":
        trainable = {"lq_encoder", "align"}
    elif stage == "joint_dm":
        trainable = {"align", "unet"}
    else:
        raise ValueError(f"unknown stage {stage!r} (expected one of {STAGES})")
    for prefix, mod in models.groups().items():
        mod.set_trainable(prefix in trainable)
    enc_group, other_group = {}, {}
    for name, p in models.named_all().items():
        if not p.requires_grad:
            continue
        (enc_group if name.startswith("lq_encoder.") else other_group)[name] = p
    return enc_group, other_group


def run_stage(models: Models, data: TrainData, sched: NoiseSchedule,
              cfg: ModelConfig, stage: str, iters: int,
              lr_other: float, lr_encoder: float | None = None,
              log: list | None = None, seed: int | None = None,
              fixed_batch: dict | None = None) -> list[str]:
    """One seeded training stage; returns (and appends to log) loss-log lines.

    Line format: ``iter, stage, loss, lr_encoder, lr_other``. A non-finite
    loss aborts immediately with the iteration in the message. When
    fixed_batch is given the sampler is bypassed (overfit harness).
    """
    if iters < 0:
        raise ValueError(f"run_stage: negative iteration count {iters}")
    seed = cfg.seed if seed is None else seed
    enc_group, other_group = _stage_partition(stage, models)
    if enc_group and lr_encoder is None:
        raise ValueError(f"stage {stage!r} trains the encoder; lr_encoder required")
    if enc_group and lr_encoder > lr_other:
        raise ValueError(
            f"encoder LR {lr_encoder} must not exceed the other-components LR {lr_other}"
        )
    use_align = stage != "prior"
    opt_enc = AdamW(enc_group, lr=lr_encoder) if enc_group else None
    opt_other = AdamW(other_group, lr=lr_other)
    all_trainable = {**enc_group, **other_group}
    data_rng = rngmod.stream(seed, f"{stage}-data")
    noise_rng = rngmod.stream(seed, f"{stage}-noise")
    dropout_rng = rngmod.stream(seed, f"{stage}-dropout")
    lines: list[str] = []
    n = len(data) if data is not None else 0
    for it in range(iters):
        if fixed_batch is not None:
            batch = fixed_batch
        else:
            idx = data_rng.integers(0, n, size=cfg.batch)
            batch = {"x0": data.x0[idx], "lq": data.lq[idx],
                     "captions": [data.captions[i] for i in idx]}
        loss = loss_eq3(batch, models, sched, noise_rng, dropout_rng,
                        cfg.dropout, use_align=use_align)
        value = float(loss.item())
        if not np.isfinite(value):
            raise RuntimeError(f"stage {stage!r}: non-finite loss at iteration {it}")
        for p in all_trainable.values():
            p.grad = None
        loss.backward()
        clip_global_norm(all_trainable, cfg.grad_clip)
        lr_e = cosine_lr(lr_encoder, it, iters) if opt_enc else 0.0
        lr_o = cosine_lr(lr_other, it, iters)
        if opt_enc:
            opt_enc.step(lr=lr_e)
        opt_other.step(lr=lr_o)
        lines.append(f"{it}, {stage}, {value!r}, {lr_e!r}, {lr_o!r}")
    if log is not None:
        log.extend(lines)
    return lines


def run_joint_stages(cfg: ModelConfig, models: Models, data: TrainData,
                     sched: NoiseSchedule, log: list | None = None) -> dict:
    """The fine-tuning half of the schedule, routed by the ablation key.

    Ablations change the trainable partition (ft_en_fix_dm, fix_en_ft_dm)
    or split the joint stage into an encoder pass then a denoiser pass
    (ft_en_dm_sp); everything else runs the plain joint stage.
    """
    out: dict[str, list[str]] = {}
    if cfg.ablation == "ft_en_fix_dm":
        out["joint_enc"] = run_stage(
            models, data, sched, cfg, "joint_enc", cfg.joint_iters,
            lr_other=cfg.lr_unet, lr_encoder=cfg.lr_encoder, log=log)
    elif cfg.ablation == "fix_en_ft_dm":
        out["joint_dm"] = run_stage(
            models, data, sched, cfg, "joint_dm", cfg.joint_iters,
            lr_other=cfg.lr_unet, log=log)
    elif cfg.ablation == "ft_en_dm_sp":
        half = cfg.joint_iters // 2
        out["joint_enc"] = run_stage(
            models, data, sched, cfg, "joint_enc", half,
            lr_other=cfg.lr_unet, lr_encoder=cfg.lr_encoder, log=log)
        out["joint_dm"] = run_stage(
            models, data, sched, cfg, "joint_dm", cfg.joint_iters - half,
            lr_other=cfg.lr_unet, log=log)
    else:
        out["joint"] = run_stage(
            models, data, sched, cfg, "joint", cfg.joint_iters,
            lr_other=cfg.lr_unet, lr_encoder=cfg.lr_encoder, log=log)
    return out


def run_two_stage(cfg: ModelConfig, models: Models, data: TrainData,
                  sched: NoiseSchedule, log: list | None = None) -> dict:
    """Alignment pretraining then joint fine-tuning, honoring the ablation key.

    Returns {stage_name: log lines}. wo_pretrain_align skips the first
    stage; wo_align / last_feats only alter model construction and route
    through the plain joint stage.
    """
    out: dict[str, list[str]] = {}
    if cfg.ablation != "wo_pretrain_align":
        out["pretrain_align"] = run_stage(
            models, data, sched, cfg, "pretrain_align", cfg.align_iters,
            lr_other=cfg.lr_align, log=log)
    out.update(run_joint_stages(cfg, models, data, sched, log=log))
    return out


def save_models(models: Models, directory) -> None:
    save_checkpoint(directory, {k: p.data for k, p in models.named_all().items()})


def load_model_groups(models: Models, directory, prefixes) -> None:
    """Strictly load the named parameter groups from a checkpoint.

    Groups outside `prefixes` are left as built, which lets a consumer
    rebuild e.g. the alignment module under a different ablation while
    reusing the frozen VAE / denoiser / text weights.
    """
    prefixes = tuple(prefixes)
    state = {k: v for k, v in load_checkpoint(directory).items()
             if k.split(".", 1)[0] in prefixes}
    named = {k: v for k, v in models.named_all().items()
             if k.split(".", 1)[0] in prefixes}
    missing = sorted(set(named) - set(state))
    extra = sorted(set(state) - set(named))
    if missing or extra:
        raise KeyError(f"checkpoint mismatch: missing {missing[:3]}, extra {extra[:3]}")
    for name, p in named.items():
        if state[name].shape != p.data.shape:
            raise ValueError(
                f"{name}: checkpoint shape {state[name].shape} != model {p.data.shape}"
            )
        p.data = state[name].astype(np.float32)


def load_models(models: Models, directory) -> None:
    load_model_groups(models, directory, _PREFIXES)


def params_digest(params: dict[str, Tensor]) -> str:
    """Order-independent digest of named parameter values (freeze probes)."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()
