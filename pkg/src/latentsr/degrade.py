"""Procedural toy images with captions, and the seeded degradation pipeline.

HQ images are anti-aliased renders of 1-3 same-kind, same-color shapes on a
muted background; the caption tokens (count, color, kind) are derived from
the generative parameters, so caption content is verifiable by construction.

Degradation runs in [0,1] pixel space: per severity order, Gaussian blur,
downscale (area or bicubic), additive Gaussian noise, then 8x8 block-DCT
compression; afterwards one bicubic upscale returns to source resolution,
so LQ and HQ always share shape. Everything is seeded and bit-reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .config import DEFAULT_PRESETS
from .fileio import save_ppm, save_tensor

__all__ = [
    "VOCAB",
    "NULL_ID",
    "encode_caption",
    "decode_caption",
    "ToyImageSpec",
    "synth_spec",
    "render",
    "shape_mask",
    "caption_tokens",
    "synth_hq",
    "DegradationRecipe",
    "sample_recipe",
    "degrade",
    "gaussian_blur",
    "resize",
    "block_compress",
    "build_dataset",
    "load_manifest",
]

# -- caption vocabulary ---------------------------------------------------------

_COUNTS = ["one", "two", "three"]
_COLORS = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"]
_KINDS = ["circle", "square", "triangle"]

VOCAB: dict[str, int] = {"<null>": 0}
for _w in _COUNTS + _COLORS + _KINDS:
    VOCAB[_w] = len(VOCAB)
NULL_ID = 0

_ID_TO_WORD = {i: w for w, i in VOCAB.items()}

_PALETTE = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.90, 0.85, 0.15),
    "cyan": (0.15, 0.80, 0.80),
    "magenta": (0.85, 0.20, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.20, 0.75),
}


def encode_caption(words: list[str]) -> list[int]:
    try:
        return [VOCAB[w] for w in words]
    except KeyError as e:
        raise ValueError(f"unknown caption word {e.args[0]!r}") from e


def decode_caption(ids: list[int]) -> list[str]:
    try:
        return [_ID_TO_WORD[int(i)] for i in ids]
    except KeyError as e:
        raise ValueError(f"unknown caption token id {e.args[0]!r}") from e


# -- toy image synthesis ----------------------------------------------------------


@dataclass(frozen=True)
class ToyImageSpec:
    size: int
    kind: str
    color: str
    centers: tuple            # ((cx, cy), ...) in pixel units
    radius: float
    background: tuple         # RGB in [0,1]
    grad_dir: float           # vertical brightness gradient strength

    @property
    def count(self) -> int:
        return len(self.centers)


def synth_spec(rng: np.random.Generator, size: int = 32) -> ToyImageSpec:
    kind = _KINDS[rng.integers(0, len(_KINDS))]
    color = _COLORS[rng.integers(0, len(_COLORS))]
    count = int(rng.integers(1, 4))
    radius = float(rng.uniform(size * 0.11, size * 0.2))
    margin = radius + 1.0
    centers = tuple(
        (float(rng.uniform(margin, size - margin)), float(rng.uniform(margin, size - margin)))
        for _ in range(count)
    )
    bg_level = float(rng.uniform(0.08, 0.32))
    bg_tint = rng.uniform(-0.03, 0.03, size=3)
    background = tuple(float(np.clip(bg_level + t, 0.0, 1.0)) for t in bg_tint)
    grad_dir = float(rng.uniform(-0.12, 0.12))
    return ToyImageSpec(size, kind, color, centers, radius, background, grad_dir)


def _mask_grid(spec: ToyImageSpec, ss: int) -> np.ndarray:
    """Boolean union mask of all shapes on a supersampled grid."""
    n = spec.size * ss
    coords = (np.arange(n) + 0.5) / ss
    X, Y = np.meshgrid(coords, coords)
    mask = np.zeros((n, n), dtype=bool)
    r = spec.radius
    for cx, cy in spec.centers:
        if spec.kind == "circle":
            mask |= (X - cx) ** 2 + (Y - cy) ** 2 <= r * r
        elif spec.kind == "square":
            half = r * 0.886  # area-matched to the disk
            mask |= (np.abs(X - cx) <= half) & (np.abs(Y - cy) <= half)
        else:  # upward triangle, circumradius r
            x0, y0 = cx, cy - r
            x1, y1 = cx - r * np.sqrt(3) / 2, cy + r / 2
            x2, y2 = cx + r * np.sqrt(3) / 2, cy + r / 2
            d0 = (x1 - x0) * (Y - y0) - (y1 - y0) * (X - x0)
            d1 = (x2 - x1) * (Y - y1) - (y2 - y1) * (X - x1)
            d2 = (x0 - x2) * (Y - y2) - (y0 - y2) * (X - x2)
            # v0->v1->v2 winds clockwise in image coords (Y grows downward),
            # so the interior is where every edge cross-product is <= 0
            mask |= (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
    return mask


def render(spec: ToyImageSpec, ss: int = 4) -> np.ndarray:
    """Anti-aliased [3,H,W] image in [-1,1]."""
    n = spec.size * ss
    mask = _mask_grid(spec, ss).astype(np.float64)
    ys = ((np.arange(n) + 0.5) / n - 0.5)[:, None] * np.ones((1, n))
    img = np.zeros((3, n, n))
    color = _PALETTE[spec.color]
    for ch in range(3):
        bg = spec.background[ch] + spec.grad_dir * ys
        img[ch] = mask * color[ch] + (1.0 - mask) * bg
    img = img.reshape(3, spec.size, ss, spec.size, ss).mean(axis=(2, 4))
    return np.clip(img * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)


def shape_mask(spec: ToyImageSpec) -> np.ndarray:
    """[H,W] fractional coverage of the shape union (ground truth for DAAM)."""
    ss = 4
    m = _mask_grid(spec, ss).astype(np.float32)
    return m.reshape(spec.size, ss, spec.size, ss).mean(axis=(1, 3))


def caption_tokens(spec: ToyImageSpec) -> list[int]:
    return encode_caption([_COUNTS[spec.count - 1], spec.color, spec.kind])


def synth_hq(spec_seed: int, size: int = 32) -> tuple[np.ndarray, list[int]]:
    """Seeded (image, caption) pair; identical seed gives identical bytes."""
    rng = rngmod.stream(spec_seed, "synth-hq")
    spec = synth_spec(rng, size)
    return render(spec), caption_tokens(spec)


# -- degradation stages ------------------------------------------------------------

_SIGMA_EPS = 0.05  # blur below this is a delta kernel


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding on [C,H,W] arrays."""
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    if sigma < _SIGMA_EPS:
        return img.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    # edge padding keeps the kernel valid even when radius exceeds the image
    out = img.astype(np.float64)
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = sum(k[i] * padded[:, i : i + img.shape[1], :] for i in range(len(k)))
    padded = np.pad(out, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    out = sum(k[i] * padded[:, :, i : i + img.shape[2]] for i in range(len(k)))
    return out.astype(np.float32)


def _cubic_weight(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    w = np.where(
        ax <= 1,
        (a + 2) * ax**3 - (a + 3) * ax**2 + 1,
        np.where(ax < 2, a * ax**3 - 5 * a * ax**2 + 8 * a * ax - 4 * a, 0.0),
    )
    return w


def _bicubic_1d(img: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = img.shape[axis]
    scale = in_len / out_len
    dst = np.arange(out_len, dtype=np.float64)
    src = (dst + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    moved = np.moveaxis(img, axis, -1).astype(np.float64)
    out = np.zeros(moved.shape[:-1] + (out_len,), dtype=np.float64)
    wsum = np.zeros(out_len, dtype=np.float64)
    for offset in range(-1, 3):
        idx = np.clip(base + offset, 0, in_len - 1)
        w = _cubic_weight(frac - offset)
        out += moved[..., idx] * w
        wsum += w
    out /= wsum
    return np.moveaxis(out, -1, axis)


def resize(img: np.ndarray, out_h: int, out_w: int, method: str) -> np.ndarray:
    """Resize [C,H,W]; area needs integer downscale factors, bicubic is general."""
    c, h, w = img.shape
    if method == "area":
        if h % out_h or w % out_w:
            raise ValueError(f"area resize needs integer factors: {h}x{w} -> {out_h}x{out_w}")
        fh, fw = h // out_h, w // out_w
        return (
            img.astype(np.float64).reshape(c, out_h, fh, out_w, fw).mean(axis=(2, 4)).astype(np.float32)
        )
    if method == "bicubic":
        out = _bicubic_1d(img, out_h, 1)
        out = _bicubic_1d(out, out_w, 2)
        return out.astype(np.float32)
    raise ValueError(f"unknown resize method {method!r}")


# Standard JPEG luminance quantization table, used as the quality baseline.
_QBASE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)[:, None]
    n = np.arange(8)[None, :]
    d = np.cos(np.pi * (2 * n + 1) * k / 16.0) * np.sqrt(2.0 / 8.0)
    d[0] = np.sqrt(1.0 / 8.0)
    return d


_DCT = _dct_matrix()


def block_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block-DCT quantization in [0,1] space (JPEG-style proxy).

    The DC coefficient passes through unquantized so constant regions are
    preserved exactly; AC coefficients snap to quality-scaled steps. At
    quality 100 the step table collapses to zero and the transform pair is
    a float-precision identity.
    """
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must lie in [1,100], got {quality}")
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    steps = _QBASE * s / 100.0
    c, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img.astype(np.float64), ((0, 0), (0, ph), (0, pw)), mode="reflect") * 255.0
    hh, ww = x.shape[1], x.shape[2]
    blocks = x.reshape(c, hh // 8, 8, ww // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = np.einsum("ij,cbdjk,lk->cbdil", _DCT, blocks, _DCT, optimize=True)
    quant = np.where(steps < 1e-6, coef, np.round(coef / np.where(steps < 1e-6, 1.0, steps)) * steps)
    quant[..., 0, 0] = coef[..., 0, 0]
    rec = np.einsum("ji,cbdjk,kl->cbdil", _DCT, quant, _DCT, optimize=True)
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, hh, ww)[:, :h, :w] / 255.0
    return rec.astype(np.float32)


# -- recipes -------------------------------------------------------------------------


@dataclass(frozen=True)
class DegradationRecipe:
    """Ordered stage list; stages run strictly in order, then one upscale."""

    stages: tuple = ()
    orders: int = 1
    seed: int = 0
    level: str = "custom"


def _split_scale(scale: int, orders: int) -> list[int]:
    factors = []
    remaining = scale
    for i in range(orders):
        f = remaining if i == orders - 1 else (2 if remaining > 1 else 1)
        factors.append(f)
        remaining //= f
    return factors


def sample_recipe(level: str, seed: int, presets: dict | None = None, size: int = 32) -> DegradationRecipe:
    """Draw stage parameters for a severity level from its preset ranges."""
    presets = presets or DEFAULT_PRESETS
    if level not in presets:
        raise ValueError(f"unknown degradation level {level!r} (have {sorted(presets)})")
    p = presets[level]
    rng = rngmod.stream(seed, f"recipe-{level}")
    orders = int(p.get("orders", 1))
    factors = _split_scale(int(p["scale"]), orders)
    stages = []
    for i in range(orders):
        sigma = float(rng.uniform(*p["blur"]))
        method = ["area", "bicubic"][int(rng.integers(0, 2))]
        noise = float(rng.uniform(*p["noise"]))
        quality = int(rng.integers(int(p["quality"][0]), int(p["quality"][1]) + 1))
        stages.append(("blur", sigma))
        if factors[i] > 1:
            stages.append(("resize_down", factors[i], method))
        if noise > 0:
            stages.append(("noise", noise))
        stages.append(("compress", quality))
    return DegradationRecipe(stages=tuple(stages), orders=orders, seed=seed, level=level)


def degrade(hq: np.ndarray, recipe: DegradationRecipe) -> np.ndarray:
    """Apply the recipe to a [-1,1] [3,H,W] image; output has HQ shape."""
    if not recipe.stages:
        return hq.copy()
    c, h, w = hq.shape
    noise_rng = rngmod.stream(recipe.seed, "degrade-noise")
    img = ((hq.astype(np.float64) + 1.0) * 0.5).astype(np.float32)
    for stage in recipe.stages:
        op = stage[0]
        if op == "blur":
            img = gaussian_blur(img, stage[1])
        elif op == "resize_down":
            factor, method = stage[1], stage[2]
            img = resize(img, img.shape[1] // factor, img.shape[2] // factor, method)
        elif op == "noise":
            sigma_n = stage[1]
            if sigma_n < 0:
                raise ValueError(f"noise sigma must be non-negative, got {sigma_n}")
            img = (img + noise_rng.normal(size=img.shape) * sigma_n).astype(np.float32)
        elif op == "compress":
            img = block_compress(img, stage[1])
        else:
            raise ValueError(f"unknown degradation stage {op!r}")
    if img.shape[1:] != (h, w):
        img = resize(img, h, w, "bicubic")
    img = np.clip(img, 0.0, 1.0)
    return (img * 2.0 - 1.0).astype(np.float32)


# -- dataset construction ---------------------------------------------------------------


def build_dataset(
    n: int,
    level: str,
    seed: int,
    out_dir,
    size: int = 32,
    presets: dict | None = None,
) -> Path:
    """Write n (HQ, LQ, caption) triples plus a manifest; returns manifest path.

    Per-item randomness comes from (seed, level, index) streams, so any
    subset of items can be rebuilt independently and the same seed always
    reproduces identical files.
    """
    if level not in ("I", "II", "III"):
        raise ValueError(f"level must be I, II, or III, got {level!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        item_rng = rngmod.spawn_item(seed, f"data-{level}", i)
        spec = synth_spec(item_rng, size)
        hq = render(spec)
        tokens = caption_tokens(spec)
        item_seed = int(item_rng.integers(0, 2**31 - 1))
        recipe = sample_recipe(level, item_seed, presets, size)
        lq = degrade(hq, recipe)
        hq_path, lq_path = f"hq_{i:05d}.ftnsr", f"lq_{i:05d}.ftnsr"
        cap_path = f"cap_{i:05d}.txt"
        save_tensor(out / hq_path, hq)
        save_tensor(out / lq_path, lq)
        save_ppm(out / f"hq_{i:05d}.ppm", ((hq + 1) / 2).transpose(1, 2, 0))
        save_ppm(out / f"lq_{i:05d}.ppm", ((lq + 1) / 2).transpose(1, 2, 0))
        (out / cap_path).write_text(" ".join(decode_caption(tokens)) + "\n", encoding="ascii")
        lines.append(f"{i}, {hq_path}, {lq_path}, {cap_path}, {item_seed}, {level}\n")
    manifest = out / "manifest.txt"
    manifest.write_text("".join(lines), encoding="ascii")
    return manifest


def load_manifest(manifest_path) -> list[dict]:
    """Parse manifest lines into dicts with absolute paths."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    items = []
    for line in manifest_path.read_text(encoding="ascii").splitlines():
        if not line.strip():
            continue
        idx, hq, lq, cap, item_seed, level = [part.strip() for part in line.split(",")]
        items.append(
            {
                "index": int(idx),
                "hq_path": base / hq,
                "lq_path": base / lq,
                "caption_path": base / cap,
                "seed": int(item_seed),
                "level": level,
            }
        )
    return items


def dataset_digest(manifest_path) -> str:
    """Order-stable digest over the manifest and every referenced file."""
    h = hashlib.sha256()
    manifest_path = Path(manifest_path)
    h.update(manifest_path.read_bytes())
    for item in load_manifest(manifest_path):
        for key in ("hq_path", "lq_path", "caption_path"):
            h.update(Path(item[key]).read_bytes())
    return h.hexdigest()
