"""Neural building blocks: linear, norms, attention, transformer, resampling.

Modules are plain objects holding parameter Tensors. ``named_params()``
walks the module tree and yields stable dotted names, which double as the
checkpoint entry names. Trainability is toggled by flipping
``requires_grad`` on the parameters; forward code never branches on it.

Residual-branch output projections are zero-initialized throughout, so a
fresh transformer block is the identity map and inserting one into a
pretrained flow cannot perturb it at step zero.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_batch_bias,
    add_channel_bias,
    channel_affine,
    conv2d,
    matmul,
    mul,
    mul_batch_bias,
    permute,
    reshape,
    silu,
    softmax,
    standardize,
    upsample_nearest2x,
)

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "GroupNorm",
    "Conv2d",
    "attention",
    "SelfAttention",
    "CrossAttention",
    "FeedForward",
    "TransformerBlock",
    "Downsample2x",
    "Upsample2x",
    "ResBlock",
    "nchw_to_tokens",
    "tokens_to_nchw",
]


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def nchw_to_tokens(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,H*W,C] token sequence (row-major spatial order)."""
    b, c, h, w = x.shape
    return reshape(permute(x, (0, 2, 3, 1)), (b, h * w, c))


def tokens_to_nchw(t: Tensor, h: int, w: int) -> Tensor:
    """Inverse of nchw_to_tokens for a known spatial extent."""
    b, l, c = t.shape
    if l != h * w:
        raise ShapeError(f"tokens_to_nchw: {l} tokens cannot fill {h}x{w}")
    return permute(reshape(t, (b, h, w, c)), (0, 3, 1, 2))


class Module:
    """Base: parameter registry plus recursive traversal."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, t in self._params.items():
            out[f"{prefix}{name}"] = t
        for name, child in self._children.items():
            out.update(child.named_params(f"{prefix}{name}."))
        return out

    def set_trainable(self, flag: bool) -> None:
        for t in self.named_params().values():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def zero_grads(self) -> None:
        for t in self.named_params().values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:4]}, extra {extra[:4]}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {t.data.shape}")
            t.data = np.ascontiguousarray(arr)


class Linear(Module):
    """Affine map on the last axis; weight stored [out, in]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            w = np.zeros((d_out, d_in), dtype=np.float32)
        else:
            w = fan_in_uniform(rng, (d_out, d_in), d_in)
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear: input width {x.shape[-1]} != {self.d_in}")
        flat = reshape(x, (-1, self.d_in)) if x.ndim != 2 else x
        out = matmul(flat, permute(self.weight, (1, 0)))
        if self.bias is not None:
            out = add_batch_bias(out, self.bias)
        if x.ndim != 2:
            out = reshape(out, (*lead, self.d_out))
        return out


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.d, self.eps = d, eps
        self.gamma = self.param("gamma", np.ones(d, dtype=np.float32))
        self.beta = self.param("beta", np.zeros(d, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = reshape(x, (-1, self.d)) if x.ndim != 2 else x
        out = add_batch_bias(mul_batch_bias(standardize(flat, axis=-1, eps=self.eps), self.gamma), self.beta)
        return reshape(out, (*lead, self.d)) if x.ndim != 2 else out


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ShapeError(f"group_norm: channels {channels} not divisible by groups {groups}")
        self.channels, self.groups, self.eps = channels, groups, eps
        self.gamma = self.param("gamma", np.ones(channels, dtype=np.float32))
        self.beta = self.param("beta", np.zeros(channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"group_norm: got {c} channels, configured {self.channels}")
        grouped = reshape(x, (b, self.groups, (c // self.groups) * h * w))
        normed = reshape(standardize(grouped, axis=-1, eps=self.eps), (b, c, h, w))
        return channel_affine(normed, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, zero_init: bool = False, bias: bool = True):
        super().__init__()
        self.stride, self.pad = stride, pad
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=np.float32)
        else:
            w = fan_in_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.zeros(c_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; also returns the [B,L,M] weight map."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"attention: need 3-D q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1] or k.shape[:2] != v.shape[:2]:
        raise ShapeError(f"attention: widths q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, permute(k, (0, 2, 1))), scale)
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    x = reshape(x, (b, l, heads, d // heads))
    return reshape(permute(x, (0, 2, 1, 3)), (b * heads, l, d // heads))


def _merge_heads(x: Tensor, heads: int) -> Tensor:
    bh, l, dh = x.shape
    x = reshape(x, (bh // heads, heads, l, dh))
    return reshape(permute(x, (0, 2, 1, 3)), (bh // heads, l, heads * dh))


class SelfAttention(Module):
    def __init__(self, d: int, rng: np.random.Generator, heads: int = 1):
        super().__init__()
        if d % heads:
            raise ShapeError(f"attention width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = self.child("q", Linear(d, d, rng, bias=False))
        self.k = self.child("k", Linear(d, d, rng, bias=False))
        self.v = self.child("v", Linear(d, d, rng, bias=False))
        self.out = self.child("out", Linear(d, d, rng, zero_init=True))

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self.q(x), self.k(x), self.v(x)
        if self.heads > 1:
            q, k, v = (_split_heads(t, self.heads) for t in (q, k, v))
        ctx, _ = attention(q, k, v)
        if self.heads > 1:
            ctx = _merge_heads(ctx, self.heads)
        return self.out(ctx)


class CrossAttention(Module):
    """Latent queries attend over context tokens (text embeddings).

    When ``capture`` is set to a list, each forward appends the raw [B,L,M]
    weight map (averaged over heads) as a detached array; this is the hook
    used for attention attribution.
    """

    def __init__(self, d: int, d_ctx: int, rng: np.random.Generator, heads: int = 1):
        super().__init__()
        if d % heads:
            raise ShapeError(f"attention width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = self.child("q", Linear(d, d, rng, bias=False))
        self.k = self.child("k", Linear(d_ctx, d, rng, bias=False))
        self.v = self.child("v", Linear(d_ctx, d, rng, bias=False))
        self.out = self.child("out", Linear(d, d, rng, zero_init=True))
        self.capture: Optional[list] = None

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        q, k, v = self.q(x), self.k(context), self.v(context)
        if self.heads > 1:
            q, k, v = (_split_heads(t, self.heads) for t in (q, k, v))
        ctx, weights = attention(q, k, v)
        if self.capture is not None:
            wmap = weights.data
            if self.heads > 1:
                bh, l, m = wmap.shape
                wmap = wmap.reshape(bh // self.heads, self.heads, l, m).mean(axis=1)
            self.capture.append(wmap.copy())
        if self.heads > 1:
            ctx = _merge_heads(ctx, self.heads)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d: int, rng: np.random.Generator, mult: int = 2):
        super().__init__()
        self.up = self.child("up", Linear(d, d * mult, rng))
        self.down = self.child("down", Linear(d * mult, d, rng, zero_init=True))

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(silu(self.up(x)))


class TransformerBlock(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward.

    With zero-initialized residual output projections each branch contributes
    exactly zero, so a fresh block is the identity map.
    """

    def __init__(self, d: int, rng: np.random.Generator, d_ctx: Optional[int] = None,
                 heads: int = 1, ff_mult: int = 2):
        super().__init__()
        self.d, self.d_ctx = d, d_ctx
        self.norm1 = self.child("norm1", LayerNorm(d))
        self.attn = self.child("attn", SelfAttention(d, rng, heads))
        if d_ctx is not None:
            self.norm_ctx = self.child("norm_ctx", LayerNorm(d))
            self.cross = self.child("cross", CrossAttention(d, d_ctx, rng, heads))
        else:
            self.norm_ctx = None
            self.cross = None
        self.norm2 = self.child("norm2", LayerNorm(d))
        self.ff = self.child("ff", FeedForward(d, rng, ff_mult))

    def __call__(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        if x.shape[-1] != self.d:
            raise ShapeError(f"transformer_block: width {x.shape[-1]} != {self.d}")
        x = add(x, self.attn(self.norm1(x)))
        if self.cross is not None:
            if context is None:
                raise ShapeError("transformer_block: cross-attention configured but no context given")
            if context.shape[-1] != self.d_ctx:
                raise ShapeError(f"transformer_block: context width {context.shape[-1]} != {self.d_ctx}")
            x = add(x, self.cross(self.norm_ctx(x), context))
        x = add(x, self.ff(self.norm2(x)))
        return x


class Downsample2x(Module):
    """Halve H and W with a stride-2 2x2 conv (exact extent division)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv = self.child("conv", Conv2d(c_in, c_out, 2, rng, stride=2, pad=0))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"downsample2x: odd spatial extents {x.shape}")
        return self.conv(x)


class Upsample2x(Module):
    """Nearest-neighbor 2x upsample followed by a 3x3 conv."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv = self.child("conv", Conv2d(c_in, c_out, 3, rng, stride=1, pad=1))

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(upsample_nearest2x(x))


class ResBlock(Module):
    """GroupNorm-SiLU-conv pair with a residual skip.

    The second conv is zero-initialized so a fresh block passes its input
    through unchanged. ``t_dim`` adds a per-channel shift projected from a
    time embedding. The shift goes in *after* the second norm: a norm whose
    group count equals the channel count would otherwise subtract a
    per-channel constant right back out.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 groups: int = 8, t_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = self.child("norm1", GroupNorm(c_in, min(groups, c_in)))
        self.conv1 = self.child("conv1", Conv2d(c_in, c_out, 3, rng, pad=1))
        self.norm2 = self.child("norm2", GroupNorm(c_out, min(groups, c_out)))
        self.conv2 = self.child("conv2", Conv2d(c_out, c_out, 3, rng, pad=1, zero_init=True))
        self.t_proj = self.child("t_proj", Linear(t_dim, c_out, rng)) if t_dim else None
        self.skip = self.child("skip", Conv2d(c_in, c_out, 1, rng)) if c_in != c_out else None

    def __call__(self, x: Tensor, t_emb: Optional[Tensor] = None) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        h = self.norm2(h)
        if self.t_proj is not None:
            if t_emb is None:
                raise ShapeError("resblock: time projection configured but no embedding given")
            h = add_channel_bias(h, self.t_proj(silu(t_emb)))
        h = self.conv2(silu(h))
        skip = self.skip(x) if self.skip is not None else x
        return add(skip, h)
