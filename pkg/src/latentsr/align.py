"""Fusion of LQ features with the noisy latent into aligned denoiser input.

Two 3x3 convs lift x_t and f_lq to a common width, the channel concat is
flattened to per-pixel tokens, two transformer blocks mix them, the conv'd
x_t branch rejoins as a zero-padded residual, and a token-wise linear maps
to the denoiser input width. Spatial extent is preserved throughout.

The conv-add baseline (one conv per input, summed) lives here too; the
config values `add` and `none` both select it.
"""

from __future__ import annotations

import numpy as np

from .nn import Conv2d, Linear, Module, TransformerBlock, nchw_to_tokens, tokens_to_nchw
from .tensor import ShapeError, Tensor, add, add_batch_bias, concat, narrow

__all__ = ["AlignmentModule", "BaselineAddAlign", "build_align"]


class AlignmentModule(Module):
    """align(x_t, f_lq) -> f_a with a transformer fusion core.

    The positional table covers max_tokens positions and is narrowed to the
    actual token count, so smaller inputs reuse the leading rows. It starts
    at zero, which keeps a fresh module equal to the hand-composed
    linear-of-concat form (transformer blocks are identity at init).
    """

    def __init__(self, c_lat: int, c_pen: int, c_f: int, c_a: int,
                 rng: np.random.Generator, heads: int = 1, max_tokens: int = 64):
        super().__init__()
        self.c_lat, self.c_pen, self.c_f, self.c_a = c_lat, c_pen, c_f, c_a
        self.max_tokens = max_tokens
        self.conv_x = self.child("conv_x", Conv2d(c_lat, c_f, 3, rng, pad=1))
        self.conv_m = self.child("conv_m", Conv2d(c_pen, c_f, 3, rng, pad=1))
        self.pos = self.param("pos", np.zeros((max_tokens, 2 * c_f), dtype=np.float32))
        self.block1 = self.child("block1", TransformerBlock(2 * c_f, rng, heads=heads))
        self.block2 = self.child("block2", TransformerBlock(2 * c_f, rng, heads=heads))
        self.out_linear = self.child("out_linear", Linear(2 * c_f, c_a, rng))

    def __call__(self, x_t: Tensor, f_lq: Tensor) -> Tensor:
        if x_t.ndim != 4 or f_lq.ndim != 4:
            raise ShapeError(f"align: need 4-D inputs, got {x_t.shape} and {f_lq.shape}")
        if x_t.shape[0] != f_lq.shape[0] or x_t.shape[2:] != f_lq.shape[2:]:
            raise ShapeError(f"align: batch/spatial mismatch {x_t.shape} vs {f_lq.shape}")
        if x_t.shape[1] != self.c_lat or f_lq.shape[1] != self.c_pen:
            raise ShapeError(
                f"align: channel widths {x_t.shape[1]}/{f_lq.shape[1]} "
                f"!= configured {self.c_lat}/{self.c_pen}"
            )
        b, _, h, w = x_t.shape
        n_tok = h * w
        if n_tok > self.max_tokens:
            raise ShapeError(f"align: {n_tok} tokens exceed positional table ({self.max_tokens})")
        f_x = self.conv_x(x_t)
        f_m = self.conv_m(f_lq)
        f_c = concat([f_x, f_m], axis=1)
        tok = nchw_to_tokens(f_c)
        tok = add_batch_bias(tok, narrow(self.pos, 0, 0, n_tok))
        tok = self.block2(self.block1(tok))
        # residual re-entry of the x_t branch, zero-padded to the concat width
        pad = Tensor.zeros((b, self.c_f, h, w))
        residual = nchw_to_tokens(concat([f_x, pad], axis=1))
        fused = add(tok, residual)
        return tokens_to_nchw(self.out_linear(fused), h, w)


class BaselineAddAlign(Module):
    """One conv per input, summed: the no-alignment comparison path."""

    def __init__(self, c_lat: int, c_pen: int, c_a: int, rng: np.random.Generator, k: int = 3):
        super().__init__()
        self.c_lat, self.c_pen, self.c_a = c_lat, c_pen, c_a
        self.conv_x = self.child("conv_x", Conv2d(c_lat, c_a, k, rng, pad=k // 2))
        self.conv_m = self.child("conv_m", Conv2d(c_pen, c_a, k, rng, pad=k // 2))

    def __call__(self, x_t: Tensor, f_lq: Tensor) -> Tensor:
        if x_t.ndim != 4 or f_lq.ndim != 4:
            raise ShapeError(f"align: need 4-D inputs, got {x_t.shape} and {f_lq.shape}")
        if x_t.shape[0] != f_lq.shape[0] or x_t.shape[2:] != f_lq.shape[2:]:
            raise ShapeError(f"align: batch/spatial mismatch {x_t.shape} vs {f_lq.shape}")
        return add(self.conv_x(x_t), self.conv_m(f_lq))


def build_align(cfg, rng: np.random.Generator) -> Module:
    """Instantiate the alignment path named by cfg.align."""
    max_tokens = (cfg.image_size // 4) ** 2
    if cfg.align == "full":
        return AlignmentModule(
            cfg.c_lat, cfg.c_pen, cfg.align_conv_width, cfg.c_align,
            rng, heads=cfg.align_heads, max_tokens=max_tokens,
        )
    if cfg.align in ("add", "none"):
        return BaselineAddAlign(cfg.c_lat, cfg.c_pen, cfg.c_align, rng)
    raise ValueError(f"unknown align mode {cfg.align!r}")
