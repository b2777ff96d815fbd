"""Tiny two-level U-Net eps-predictor conditioned on text and timestep.

The aligned features fully replace the raw latent at the input conv; the
output conv is zero-initialized so a fresh model predicts exactly zero.
Each resolution level pairs a residual block (timestep shift) with a
transformer block whose cross-attention reads caption embeddings; skip
tensors concat back in on the way up.

Caption text is an embedding-table lookup plus a learned positional row,
with token id 0 reserved as the null (unconditional) word. Cross-attention
weight maps can be captured per layer for attribution.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .nn import (
    Conv2d,
    Downsample2x,
    GroupNorm,
    Linear,
    Module,
    ResBlock,
    TransformerBlock,
    Upsample2x,
    nchw_to_tokens,
    tokens_to_nchw,
)
from .tensor import ShapeError, Tensor, add_batch_bias, concat, reshape, silu, take_rows

__all__ = ["timestep_embedding", "TextEmbedder", "UNetDenoiser"]


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal [B,dim] features of integer timesteps (numpy, no grad)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb.astype(np.float32)


class TextEmbedder(Module):
    """Token table + positional rows; id 0 is the null/uncond word."""

    def __init__(self, vocab_size: int, d: int, max_len: int, rng: np.random.Generator):
        super().__init__()
        self.vocab_size, self.d, self.max_len = vocab_size, d, max_len
        self.table = self.param("table", rng.normal(0.0, 0.1, (vocab_size, d)).astype(np.float32))
        self.pos = self.param("pos", np.zeros((max_len, d), dtype=np.float32))

    def _pad(self, tokens) -> list[int]:
        ids = [int(i) for i in tokens][: self.max_len]
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise ValueError(f"unknown token id {i} (vocabulary size {self.vocab_size})")
        return ids + [0] * (self.max_len - len(ids))

    def embed_caption(self, tokens) -> Tensor:
        """Single caption -> [1,M,d]; empty input gives the uncond embedding."""
        return self.embed_batch([tokens])

    def embed_batch(self, captions) -> Tensor:
        """List of B token lists -> [B,M,d]."""
        ids = np.array([self._pad(c) for c in captions], dtype=np.int64)
        b = ids.shape[0]
        rows = take_rows(self.table, ids.reshape(-1))
        return add_batch_bias(reshape(rows, (b, self.max_len, self.d)), self.pos)


class _SpatialTransformer(Module):
    """Token-space transformer over an NCHW feature map, with text context."""

    def __init__(self, d: int, d_ctx: int, rng: np.random.Generator,
                 heads: int = 1, ff_mult: int = 2):
        super().__init__()
        self.block = self.child("block", TransformerBlock(d, rng, d_ctx=d_ctx,
                                                          heads=heads, ff_mult=ff_mult))
        self.last_hw = (0, 0)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        _, _, h, w = x.shape
        self.last_hw = (h, w)
        return tokens_to_nchw(self.block(nchw_to_tokens(x), context), h, w)


class UNetDenoiser(Module):
    """predict_eps(f_a, t, c) with two resolution levels and a mid block."""

    def __init__(self, c_a: int, c_lat: int, rng: np.random.Generator,
                 base: int = 32, mult: int = 2, heads: int = 1,
                 t_dim: int = 64, d_ctx: int = 32, ff_mult: int = 2):
        super().__init__()
        self.c_a, self.c_lat, self.t_dim, self.d_ctx = c_a, c_lat, t_dim, d_ctx
        c1, c2 = base, base * mult
        self.t_in = self.child("t_in", Linear(t_dim // 2, t_dim, rng))
        self.t_out = self.child("t_out", Linear(t_dim, t_dim, rng))
        self.conv_in = self.child("conv_in", Conv2d(c_a, c1, 3, rng, pad=1))
        self.res_d1 = self.child("res_d1", ResBlock(c1, c1, rng, t_dim=t_dim))
        self.tf_d1 = self.child("tf_d1", _SpatialTransformer(c1, d_ctx, rng, heads, ff_mult))
        self.down = self.child("down", Downsample2x(c1, c2, rng))
        self.res_d2 = self.child("res_d2", ResBlock(c2, c2, rng, t_dim=t_dim))
        self.tf_d2 = self.child("tf_d2", _SpatialTransformer(c2, d_ctx, rng, heads, ff_mult))
        self.res_m1 = self.child("res_m1", ResBlock(c2, c2, rng, t_dim=t_dim))
        self.tf_m = self.child("tf_m", _SpatialTransformer(c2, d_ctx, rng, heads, ff_mult))
        self.res_m2 = self.child("res_m2", ResBlock(c2, c2, rng, t_dim=t_dim))
        self.res_u2 = self.child("res_u2", ResBlock(2 * c2, c2, rng, t_dim=t_dim))
        self.tf_u2 = self.child("tf_u2", _SpatialTransformer(c2, d_ctx, rng, heads, ff_mult))
        self.up = self.child("up", Upsample2x(c2, c1, rng))
        self.res_u1 = self.child("res_u1", ResBlock(2 * c1, c1, rng, t_dim=t_dim))
        self.tf_u1 = self.child("tf_u1", _SpatialTransformer(c1, d_ctx, rng, heads, ff_mult))
        self.norm_out = self.child("norm_out", GroupNorm(c1, min(8, c1)))
        self.conv_out = self.child("conv_out", Conv2d(c1, c_lat, 3, rng, pad=1, zero_init=True))

    def _spatial_transformers(self):
        return [("tf_d1", self.tf_d1), ("tf_d2", self.tf_d2), ("tf_m", self.tf_m),
                ("tf_u2", self.tf_u2), ("tf_u1", self.tf_u1)]

    def predict_eps(self, f_a: Tensor, t, c: Tensor,
                    daam_sink: Optional[list] = None) -> Tensor:
        t = np.asarray(t).reshape(-1)
        if f_a.ndim != 4 or f_a.shape[1] != self.c_a:
            raise ShapeError(f"predict_eps: f_a shape {f_a.shape}, expected [B,{self.c_a},h,w]")
        if t.shape[0] != f_a.shape[0] or c.shape[0] != f_a.shape[0]:
            raise ShapeError(
                f"predict_eps: batch mismatch f_a {f_a.shape[0]}, t {t.shape[0]}, c {c.shape[0]}"
            )
        if c.ndim != 3 or c.shape[-1] != self.d_ctx:
            raise ShapeError(f"predict_eps: context shape {c.shape}, expected [B,M,{self.d_ctx}]")
        if daam_sink is not None:
            for _, tf in self._spatial_transformers():
                tf.block.cross.capture = []
        try:
            temb = self.t_out(silu(self.t_in(Tensor(timestep_embedding(t, self.t_dim // 2)))))
            h1 = self.tf_d1(self.res_d1(self.conv_in(f_a), temb), c)
            h2 = self.tf_d2(self.res_d2(self.down(h1), temb), c)
            m = self.res_m2(self.tf_m(self.res_m1(h2, temb), c), temb)
            u = self.tf_u2(self.res_u2(concat([m, h2], axis=1), temb), c)
            u = self.tf_u1(self.res_u1(concat([self.up(u), h1], axis=1), temb), c)
            out = self.conv_out(silu(self.norm_out(u)))
        finally:
            if daam_sink is not None:
                for name, tf in self._spatial_transformers():
                    for wmap in tf.block.cross.capture or ():
                        daam_sink.append((name, tf.last_hw[0], tf.last_hw[1], wmap))
                    tf.block.cross.capture = None
        return out

    def __call__(self, f_a: Tensor, t, c: Tensor, daam_sink: Optional[list] = None) -> Tensor:
        return self.predict_eps(f_a, t, c, daam_sink)
