"""Reference metrics (PSNR, windowed SSIM), cross-attention attribution
maps, and the dataset evaluation harness.

Images are [-1,1] [3,H,W] throughout; metrics map them to [0,1] first so
the dynamic range matches the constants' convention. SSIM uses an 8x8
uniform window (toy images are 32x32; an 11x11 Gaussian would leave too
few windows) with population moments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as rngmod
from .degrade import encode_caption, load_manifest
from .fileio import load_tensor, save_ppm
from .schedule import GuidanceConfig, NoiseSchedule
from .pipeline import restore

__all__ = [
    "psnr",
    "ssim",
    "bilinear_upscale",
    "DaamMap",
    "compute_daam",
    "MetricReport",
    "run_eval",
]

_LUMA = np.array([0.299, 0.587, 0.114])
_PSNR_CAP = 100.0


def _to_unit(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) * 0.5


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) on the [0,1] scale, capped at 100 dB."""
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} vs {b.shape}")
    mse = float(((_to_unit(a) - _to_unit(b)) ** 2).mean())
    if mse <= 0.0:
        return _PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), _PSNR_CAP))


def _gray(img: np.ndarray) -> np.ndarray:
    arr = _to_unit(img)
    if arr.ndim == 3 and arr.shape[0] == 3:
        return np.tensordot(_LUMA, arr, axes=1)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"ssim: need [3,H,W] or [H,W], got {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over all 8x8 uniform windows (population moments)."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} vs {b.shape}")
    x, y = _gray(a), _gray(b)
    h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"ssim: image {h}x{w} smaller than {window}x{window} window")
    c1, c2 = k1 * k1, k2 * k2
    xw = np.lib.stride_tricks.sliding_window_view(x, (window, window))
    yw = np.lib.stride_tricks.sliding_window_view(y, (window, window))
    mx = xw.mean(axis=(2, 3))
    my = yw.mean(axis=(2, 3))
    vx = (xw * xw).mean(axis=(2, 3)) - mx * mx
    vy = (yw * yw).mean(axis=(2, 3)) - my * my
    cov = (xw * yw).mean(axis=(2, 3)) - mx * my
    score = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(score.mean())


def bilinear_upscale(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable linear interpolation of a [h,w] map (half-pixel centers)."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = np.clip(src - lo, 0.0, 1.0)
        return lo, hi, frac

    lo, hi, fr = axis_weights(h, out_h)
    rows = arr[lo] * (1 - fr)[:, None] + arr[hi] * fr[:, None]
    lo, hi, fr = axis_weights(w, out_w)
    return rows[:, lo] * (1 - fr)[None, :] + rows[:, hi] * fr[None, :]


@dataclass
class DaamMap:
    """Aggregated attribution for one token, min-max normalized to [0,1]."""

    token_id: int
    map: np.ndarray
    raw_min: float
    raw_max: float

    @property
    def degenerate(self) -> bool:
        return self.raw_max <= self.raw_min


def compute_daam(captured: list, caption: list, token_id: int,
                 out_size: tuple, batch_index: int = 0, max_len: int = 4) -> DaamMap:
    """Aggregate captured cross-attention into one per-pixel map.

    captured holds (layer, h, w, weights[B,L,M]) entries from every layer
    and sampler step. The token's column is selected per entry, reshaped to
    its spatial grid, bilinearly upscaled, and summed uniformly; the total
    is min-max normalized (a perfectly flat total maps to all zeros).
    """
    if not captured:
        raise ValueError("compute_daam: no captured attention maps")
    padded = list(caption)[:max_len] + [0] * (max_len - len(caption[:max_len]))
    cols = [i for i, tok in enumerate(padded) if tok == token_id]
    if not cols:
        raise ValueError(f"compute_daam: token {token_id} absent from caption {caption}")
    out_h, out_w = out_size
    total = np.zeros((out_h, out_w), dtype=np.float64)
    for _layer, h, w, wmap in captured:
        sel = wmap[batch_index][:, cols].sum(axis=1).reshape(h, w)
        total += bilinear_upscale(sel, out_h, out_w)
    lo, hi = float(total.min()), float(total.max())
    if hi <= lo:
        normed = np.zeros_like(total)
    else:
        normed = (total - lo) / (hi - lo)
    return DaamMap(token_id=token_id, map=normed.astype(np.float32), raw_min=lo, raw_max=hi)


@dataclass
class MetricReport:
    """Per-image scores plus aggregates for one dataset pass."""

    level: str
    indices: list = field(default_factory=list)
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values)) if self.psnr_values else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values)) if self.ssim_values else float("nan")

    def to_text(self) -> str:
        lines = [
            f"{i}, {p!r}, {s!r}\n"
            for i, p, s in zip(self.indices, self.psnr_values, self.ssim_values)
        ]
        if self.indices:
            lines.append(f"mean, {self.mean_psnr!r}, {self.mean_ssim!r}\n")
        return "".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="ascii")


def run_eval(models, manifest_path, sched: NoiseSchedule, steps: int,
             guidance: GuidanceConfig, seed: int, level: str = "",
             out_dir=None, capture_daam: bool = False) -> MetricReport:
    """Restore every manifest item and score against its HQ reference.

    Each item gets its own sampler stream derived from (seed, index), so
    reports are reproducible and insertion-order independent. Restored
    images (and DAAM heatmaps per caption token, when requested) are
    written next to the report when out_dir is given.
    """
    items = load_manifest(manifest_path)
    report = MetricReport(level=level)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for item in items:
        hq = load_tensor(item["hq_path"])
        lq = load_tensor(item["lq_path"])
        caption = encode_caption(item["caption_path"].read_text().split())
        sampler_rng = rngmod.spawn_item(seed, "eval-sampler", item["index"])
        sink: Optional[list] = [] if capture_daam else None
        img, _ = restore(models, lq[None], [caption], sched, steps, guidance,
                         sampler_rng, daam_sink=sink)
        report.indices.append(item["index"])
        report.psnr_values.append(psnr(img[0], hq))
        report.ssim_values.append(ssim(img[0], hq))
        if out is not None:
            save_ppm(out / f"restored_{item['index']:05d}.ppm",
                     ((img[0] + 1) / 2).transpose(1, 2, 0))
            if sink:
                for tok in caption:
                    dm = compute_daam(sink, caption, tok, hq.shape[1:],
                                      max_len=models.text.max_len)
                    save_ppm(out / f"daam_{item['index']:05d}_tok{tok}.ppm", dm.map)
    if out is not None:
        report.save(out / "report.txt")
    return report
