"""Shared builders for tiny end-to-end stacks used across test modules."""

import numpy as np
import pytest

from latentsr import rng as rngmod
from latentsr.config import ModelConfig
from latentsr.degrade import VOCAB, build_dataset
from latentsr.schedule import NoiseSchedule
from latentsr.train import build_models, prepare_training_data
from latentsr.vae import Vae


def jiggle(module, rng, scale=0.05):
    """Fill zero-initialized parameters so gradients actually flow.

    Residual output projections start at zero by design, which makes fresh
    modules exact identities; FD checks against an identity are vacuous.
    """
    for p in module.named_params().values():
        if not np.any(p.data):
            p.data = rng.normal(0.0, scale, p.data.shape).astype(np.float32)


def small_cfg(**overrides) -> ModelConfig:
    base = dict(
        image_size=16,
        c_pen=16,
        c_lat=4,
        c_align=4,
        align_conv_width=8,
        unet_base=8,
        t_dim=16,
        text_dim=8,
        text_len=4,
        batch=4,
        vae_iters=30,
        prior_iters=30,
        align_iters=20,
        joint_iters=30,
    )
    base.update(overrides)
    return ModelConfig(**base)


def build_world(cfg, tmp_path, n_items=8, level="II", data_seed=3):
    """Dataset + fresh VAE + fresh models + schedule for a config."""
    manifest = build_dataset(n_items, level, seed=data_seed,
                             out_dir=tmp_path / f"ds-{level}-{data_seed}",
                             size=cfg.image_size, presets=cfg.degrade_presets)
    vae = Vae(rngmod.stream(cfg.seed, "vae-init"), c_pen=cfg.c_pen,
              c_lat=cfg.c_lat, base=cfg.unet_base)
    models = build_models(cfg, vae, vocab_size=len(VOCAB))
    data = prepare_training_data(manifest, vae)
    sched = NoiseSchedule.linear(cfg.sched_t, cfg.beta_min, cfg.beta_max)
    return manifest, vae, models, data, sched


@pytest.fixture()
def tiny_world(tmp_path):
    cfg = small_cfg()
    manifest, vae, models, data, sched = build_world(cfg, tmp_path)
    return cfg, manifest, vae, models, data, sched
