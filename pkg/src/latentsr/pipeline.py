"""LQ-to-restored-image pipeline: encode, guided Euler sampling, decode.

The sampler integrates in the variance-exploding view but hands the model
the variance-preserving state, which equals the training-time noisy latent
exactly, so the alignment module and denoiser always see in-distribution
inputs. Guidance runs both caption and null branches per step unless the
scale is exactly 1, where the unconditional call is skipped (keeps s=1
bit-identical to a condition-only sampler and halves the cost).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .schedule import GuidanceConfig, NoiseSchedule, cfg_combine, euler_sample
from .tensor import Tensor
from .train import Models

__all__ = ["make_eps_fn", "restore"]


def make_eps_fn(models: Models, f_feat: Optional[Tensor], captions: list,
                guidance: GuidanceConfig, daam_sink: Optional[list] = None):
    """Build the sampler callback closing over conditioning.

    f_feat is the precomputed LQ feature tensor (None to bypass alignment
    and feed the raw latent, e.g. for prior-only sampling). Cross-attention
    capture, when requested, records the conditional branch only.
    """
    c_cond = models.text.embed_batch(captions)
    c_uncond = models.text.embed_batch([[] for _ in captions])

    def eps_fn(x_scaled: np.ndarray, t: int) -> np.ndarray:
        x = Tensor(x_scaled)
        tb = np.full(x_scaled.shape[0], t, dtype=np.int64)
        f_a = x if f_feat is None else models.align(x, f_feat)
        cond = models.unet.predict_eps(f_a, tb, c_cond, daam_sink=daam_sink).data
        if guidance.scale == 1.0:
            return cond
        uncond = models.unet.predict_eps(f_a, tb, c_uncond).data
        return cfg_combine(cond, uncond, guidance.scale)

    return eps_fn


def restore(models: Models, lq: np.ndarray, captions: list, sched: NoiseSchedule,
            steps: int, guidance: GuidanceConfig, rng: np.random.Generator,
            daam_sink: Optional[list] = None) -> tuple[np.ndarray, np.ndarray]:
    """Restore a [B,3,H,W] LQ batch; returns (images in [-1,1], latents).

    All parameters are treated as frozen for the duration (no tape is
    built), and the caller's rng drives only the initial latent draw.
    """
    if lq.ndim != 4 or lq.shape[1] != 3:
        raise ValueError(f"restore: need [B,3,H,W] LQ batch, got {lq.shape}")
    if len(captions) != lq.shape[0]:
        raise ValueError(f"restore: {len(captions)} captions for batch {lq.shape[0]}")
    for mod in models.groups().values():
        mod.set_trainable(False)
    feats = models.lq_encoder(Tensor(lq))
    f_feat = feats.f_lq if models.feature_tap == "penultimate" else feats.x0
    eps_fn = make_eps_fn(models, f_feat, captions, guidance, daam_sink)
    latent_shape = (lq.shape[0], models.unet.c_lat, lq.shape[2] // 4, lq.shape[3] // 4)
    x0_hat = euler_sample(eps_fn, latent_shape, sched, steps, rng=rng)
    img = models.vae.decode(Tensor(x0_hat)).data
    return np.clip(img, -1.0, 1.0).astype(np.float32), x0_hat
