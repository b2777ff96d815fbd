"""Tiny convolutional autoencoder with a penultimate feature tap.

The encoder downsamples 4x over two stages and ends wide (c_pen channels)
before a narrow latent projection (c_lat), mirroring the wide-penultimate /
narrow-latent contrast the restoration pipeline exploits: the wide tap keeps
degradation-relevant detail that the latent head compresses away. Both
outputs come from one forward pass.

Deterministic autoencoder throughout: no posterior sampling, no KL term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Downsample2x, GroupNorm, Module, ResBlock, Upsample2x
from .optim import AdamW, clip_global_norm, cosine_lr
from .tensor import ShapeError, Tensor, abs_, mean, narrow, silu, sub

__all__ = [
    "LatentFeatures",
    "VaeEncoder",
    "VaeDecoder",
    "Vae",
    "reconstruction_loss",
    "pretrain_vae",
]


@dataclass
class LatentFeatures:
    """Both encoder outputs: the wide penultimate tap and the narrow latent."""

    f_lq: Tensor  # [B, c_pen, H/4, W/4]
    x0: Tensor    # [B, c_lat, H/4, W/4]


class VaeEncoder(Module):
    """3 -> base -> c_pen over two 2x downsamples, then a c_lat projection."""

    def __init__(self, rng: np.random.Generator, c_pen: int = 64, c_lat: int = 4, base: int = 32):
        super().__init__()
        self.c_pen, self.c_lat = c_pen, c_lat
        self.conv_in = self.child("conv_in", Conv2d(3, base, 3, rng, pad=1))
        self.res1 = self.child("res1", ResBlock(base, base, rng))
        self.down1 = self.child("down1", Downsample2x(base, base, rng))
        self.res2 = self.child("res2", ResBlock(base, c_pen, rng))
        self.down2 = self.child("down2", Downsample2x(c_pen, c_pen, rng))
        self.res3 = self.child("res3", ResBlock(c_pen, c_pen, rng))
        self.norm_out = self.child("norm_out", GroupNorm(c_pen))
        self.to_latent = self.child("to_latent", Conv2d(c_pen, c_lat, 3, rng, pad=1))
        self.encode_calls = 0  # op-count probe: both outputs share one pass

    def __call__(self, img: Tensor) -> LatentFeatures:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ShapeError(f"encode: need [B,3,H,W], got {img.shape}")
        if img.shape[2] % 4 or img.shape[3] % 4:
            raise ShapeError(f"encode: spatial dims {img.shape[2:]} not divisible by 4")
        self.encode_calls += 1
        h = self.conv_in(img)
        h = self.down1(self.res1(h))
        h = self.down2(self.res2(h))
        f_lq = self.res3(h)
        x0 = self.to_latent(silu(self.norm_out(f_lq)))
        return LatentFeatures(f_lq=f_lq, x0=x0)


class VaeDecoder(Module):
    """Mirror stack: c_lat -> c_pen, two 2x upsamples, back to RGB."""

    def __init__(self, rng: np.random.Generator, c_pen: int = 64, c_lat: int = 4, base: int = 32):
        super().__init__()
        self.c_lat = c_lat
        self.conv_in = self.child("conv_in", Conv2d(c_lat, c_pen, 3, rng, pad=1))
        self.res1 = self.child("res1", ResBlock(c_pen, c_pen, rng))
        self.up1 = self.child("up1", Upsample2x(c_pen, base, rng))
        self.res2 = self.child("res2", ResBlock(base, base, rng))
        self.up2 = self.child("up2", Upsample2x(base, base, rng))
        self.res3 = self.child("res3", ResBlock(base, base, rng))
        self.norm_out = self.child("norm_out", GroupNorm(base))
        self.conv_out = self.child("conv_out", Conv2d(base, 3, 3, rng, pad=1))

    def __call__(self, x0: Tensor) -> Tensor:
        if x0.ndim != 4 or x0.shape[1] != self.c_lat:
            raise ShapeError(f"decode: need [B,{self.c_lat},h,w], got {x0.shape}")
        h = self.conv_in(x0)
        h = self.up1(self.res1(h))
        h = self.up2(self.res2(h))
        h = self.res3(h)
        return self.conv_out(silu(self.norm_out(h)))


class Vae(Module):
    def __init__(self, rng: np.random.Generator, c_pen: int = 64, c_lat: int = 4, base: int = 32):
        super().__init__()
        self.encoder = self.child("encoder", VaeEncoder(rng, c_pen, c_lat, base))
        self.decoder = self.child("decoder", VaeDecoder(rng, c_pen, c_lat, base))

    def encode(self, img: Tensor) -> LatentFeatures:
        return self.encoder(img)

    def decode(self, x0: Tensor) -> Tensor:
        return self.decoder(x0)


def _grad_diff(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Mean abs difference of neighbor-pixel gradients along one spatial axis."""
    n = a.shape[axis]
    da = sub(narrow(a, axis, 1, n - 1), narrow(a, axis, 0, n - 1))
    db = sub(narrow(b, axis, 1, n - 1), narrow(b, axis, 0, n - 1))
    return mean(abs_(sub(da, db)))


def reconstruction_loss(rec: Tensor, target: Tensor, grad_weight: float = 0.5) -> Tensor:
    """L1 plus a first-difference gradient term that sharpens edges."""
    l1 = mean(abs_(sub(rec, target)))
    g = _grad_diff(rec, target, 2) + _grad_diff(rec, target, 3)
    return l1 + g * grad_weight


def pretrain_vae(
    hq_images: np.ndarray,
    rng_root: int,
    iters: int,
    batch: int,
    lr: float,
    grad_clip: float = 1.0,
    log: list | None = None,
    c_pen: int = 64,
    c_lat: int = 4,
    base: int = 32,
) -> Vae:
    """Train the autoencoder on HQ images; returns the trained model.

    Aborts on a non-finite loss, restoring the last good parameter snapshot
    (taken every 50 iterations) instead of returning garbage.
    """
    from . import rng as rngmod

    init_rng = rngmod.stream(rng_root, "vae-init")
    model = Vae(init_rng, c_pen=c_pen, c_lat=c_lat, base=base)
    params = model.named_params()
    opt = AdamW(params, lr=lr)
    data_rng = rngmod.stream(rng_root, "vae-data")
    n = len(hq_images)
    snapshot = model.state_dict()
    for it in range(iters):
        idx = data_rng.integers(0, n, size=batch)
        x = Tensor(hq_images[idx])
        rec = model.decode(model.encode(x).x0)
        loss = reconstruction_loss(rec, x)
        value = loss.item()
        if not np.isfinite(value):
            model.load_state_dict(snapshot)
            raise RuntimeError(f"vae pretraining diverged at iteration {it}; last good state restored")
        model.zero_grads()
        loss.backward()
        clip_global_norm(params, grad_clip)
        opt.step(lr=cosine_lr(lr, it, iters))
        if log is not None:
            log.append(value)
        if it % 50 == 0:
            snapshot = model.state_dict()
    return model
