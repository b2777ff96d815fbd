"""Metric oracles (PSNR/SSIM against naive reimplementations), attribution
map aggregation, and the restore/eval harness."""

import numpy as np
import pytest

from conftest import build_world, small_cfg

from latentsr.evaluate import (
    DaamMap,
    MetricReport,
    bilinear_upscale,
    compute_daam,
    psnr,
    run_eval,
    ssim,
)
from latentsr.pipeline import make_eps_fn, restore
from latentsr.schedule import GuidanceConfig, euler_sample, euler_sigma_grid
from latentsr.tensor import Tensor


# -- PSNR ------------------------------------------------------------------------

def test_psnr_identical_hits_cap():
    img = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
    assert psnr(img, img) == 100.0


def test_psnr_known_mse():
    # diff of 0.2 in [-1,1] is 0.1 in [0,1]: MSE 0.01 -> exactly 20 dB
    a = np.zeros((3, 8, 8))
    b = np.full((3, 8, 8), 0.2)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-1, 1, (2, 3, 8, 8))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_near_identical_capped():
    a = np.zeros((3, 8, 8))
    assert psnr(a, a + 1e-9) == 100.0


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="psnr"):
        psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))


# -- SSIM ------------------------------------------------------------------------

def _naive_ssim(x, y, window=8, k1=0.01, k2=0.03):
    """Straightforward double-loop over windows with explicit moment sums."""
    h, w = x.shape
    c1, c2 = k1 * k1, k2 * k2
    scores = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            xw = x[i : i + window, j : j + window]
            yw = y[i : i + window, j : j + window]
            mx, my = xw.mean(), yw.mean()
            vx = ((xw - mx) ** 2).mean()
            vy = ((yw - my) ** 2).mean()
            cov = ((xw - mx) * (yw - my)).mean()
            scores.append(
                (2 * mx * my + c1) * (2 * cov + c2)
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(scores))


def test_ssim_identical_is_one():
    img = np.random.default_rng(2).uniform(-1, 1, (3, 16, 16))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_naive_loop():
    rng = np.random.default_rng(3)
    a = rng.uniform(-1, 1, (16, 16))
    b = np.clip(a + rng.normal(0, 0.3, (16, 16)), -1, 1)
    expect = _naive_ssim((a + 1) / 2, (b + 1) / 2)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-6)


def test_ssim_anticorrelated_is_negative():
    a = np.zeros((16, 16))
    a[:, ::2] = 0.8
    a[:, 1::2] = -0.8
    assert ssim(a, -a) < 0.0


def test_ssim_gray_equals_equal_channel_rgb():
    rng = np.random.default_rng(4)
    g = rng.uniform(-1, 1, (12, 12))
    rgb = np.repeat(g[None], 3, axis=0)
    assert ssim(rgb, -rgb) == pytest.approx(ssim(g, -g), abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError, match="ssim"):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))


# -- bilinear upscale --------------------------------------------------------------

def test_bilinear_constant_preserved():
    out = bilinear_upscale(np.full((3, 3), 0.7), 9, 5)
    np.testing.assert_allclose(out, 0.7, atol=1e-12)
    assert out.shape == (9, 5)


def test_bilinear_known_2x_values():
    src = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = bilinear_upscale(src, 2, 4)
    # half-pixel centers: src x-coords -0.25, 0.25, 0.75, 1.25 (edge-clamped)
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)
    np.testing.assert_allclose(out[1], out[0], atol=1e-12)


# -- DAAM ---------------------------------------------------------------------------

def _entry(rng, h, w, b=1, m=4):
    wmap = rng.uniform(0.0, 1.0, (b, h * w, m))
    wmap /= wmap.sum(axis=-1, keepdims=True)
    return ("tf", h, w, wmap)


def test_daam_uniform_attention_is_degenerate():
    wmap = np.full((1, 4, 4), 0.25)
    dm = compute_daam([("tf", 2, 2, wmap)], [7, 0, 0, 0], 7, (8, 8))
    assert dm.degenerate
    np.testing.assert_array_equal(dm.map, np.zeros((8, 8), dtype=np.float32))


def test_daam_duplicate_layers_do_not_change_normalized_map():
    rng = np.random.default_rng(5)
    e = _entry(rng, 2, 2)
    one = compute_daam([e], [7, 0, 0, 0], 7, (8, 8))
    two = compute_daam([e, e], [7, 0, 0, 0], 7, (8, 8))
    np.testing.assert_allclose(one.map, two.map, atol=1e-7)
    assert two.raw_max == pytest.approx(2 * one.raw_max)


def test_daam_matches_manual_aggregation():
    rng = np.random.default_rng(6)
    captured = [_entry(rng, 2, 2), _entry(rng, 4, 4)]
    caption = [3, 9, 3, 0]
    total = np.zeros((8, 8))
    for _l, h, w, wmap in captured:
        sel = wmap[0][:, [0, 2]].sum(axis=1).reshape(h, w)
        total += bilinear_upscale(sel, 8, 8)
    expect = (total - total.min()) / (total.max() - total.min())
    dm = compute_daam(captured, caption, 3, (8, 8))
    np.testing.assert_allclose(dm.map, expect, atol=1e-6)
    assert not dm.degenerate
    assert dm.map.min() == 0.0 and dm.map.max() == 1.0


def test_daam_null_token_uses_padding_columns():
    rng = np.random.default_rng(7)
    e = _entry(rng, 2, 2)
    dm = compute_daam([e], [5], 0, (4, 4))  # pad -> [5,0,0,0], cols 1..3
    manual = e[3][0][:, [1, 2, 3]].sum(axis=1).reshape(2, 2)
    manual = bilinear_upscale(manual, 4, 4)
    expect = (manual - manual.min()) / (manual.max() - manual.min())
    np.testing.assert_allclose(dm.map, expect, atol=1e-6)


def test_daam_batch_index_selects_row():
    rng = np.random.default_rng(8)
    e = _entry(rng, 2, 2, b=3)
    d0 = compute_daam([e], [5, 0, 0, 0], 5, (4, 4), batch_index=0)
    d2 = compute_daam([e], [5, 0, 0, 0], 5, (4, 4), batch_index=2)
    assert not np.allclose(d0.map, d2.map)


def test_daam_errors():
    rng = np.random.default_rng(9)
    with pytest.raises(ValueError, match="no captured"):
        compute_daam([], [1, 0, 0, 0], 1, (4, 4))
    with pytest.raises(ValueError, match="absent"):
        compute_daam([_entry(rng, 2, 2)], [1, 2, 3, 4], 9, (4, 4))


# -- report -------------------------------------------------------------------------

def test_report_aggregates():
    rep = MetricReport(level="II", indices=[0, 1, 2],
                       psnr_values=[20.0, 22.0, 30.0],
                       ssim_values=[0.5, 0.7, 0.9])
    assert rep.mean_psnr == pytest.approx(24.0, abs=1e-12)
    assert rep.mean_ssim == pytest.approx(0.7, abs=1e-12)
    text = rep.to_text()
    lines = text.strip().splitlines()
    assert len(lines) == 4 and lines[-1].startswith("mean, ")
    # repr round-trips exactly
    assert float(lines[0].split(",")[1]) == 20.0


def test_empty_report(tmp_path):
    rep = MetricReport(level="I")
    assert np.isnan(rep.mean_psnr) and np.isnan(rep.mean_ssim)
    assert rep.to_text() == ""
    rep.save(tmp_path / "r.txt")
    assert (tmp_path / "r.txt").read_text() == ""


# -- restore ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def world(tmp_path_factory):
    cfg = small_cfg()
    tmp = tmp_path_factory.mktemp("eval-world")
    return (cfg, *build_world(cfg, tmp, n_items=3))


def test_restore_shapes_and_range(world):
    cfg, manifest, vae, models, data, sched = world
    g = GuidanceConfig(scale=5.0)
    img, lat = restore(models, data.lq[:2], data.captions[:2], sched,
                       steps=3, guidance=g, rng=np.random.default_rng(0))
    assert img.shape == (2, 3, cfg.image_size, cfg.image_size)
    assert lat.shape == (2, cfg.c_lat, cfg.image_size // 4, cfg.image_size // 4)
    assert img.dtype == np.float32
    assert img.min() >= -1.0 and img.max() <= 1.0


def test_restore_deterministic(world):
    cfg, manifest, vae, models, data, sched = world
    g = GuidanceConfig(scale=5.0)
    runs = [restore(models, data.lq[:1], data.captions[:1], sched, steps=3,
                    guidance=g, rng=np.random.default_rng(4))[0]
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0], runs[1])


def test_restore_image_is_decoded_latent(world):
    cfg, manifest, vae, models, data, sched = world
    img, lat = restore(models, data.lq[:1], data.captions[:1], sched, steps=2,
                       guidance=GuidanceConfig(scale=2.0),
                       rng=np.random.default_rng(5))
    redecoded = np.clip(models.vae.decode(Tensor(lat)).data, -1, 1)
    np.testing.assert_array_equal(img, redecoded.astype(np.float32))


def test_restore_input_validation(world):
    cfg, manifest, vae, models, data, sched = world
    g = GuidanceConfig(scale=1.0)
    with pytest.raises(ValueError, match="LQ batch"):
        restore(models, data.lq[0], data.captions[:1], sched, 2, g,
                np.random.default_rng(0))
    with pytest.raises(ValueError, match="captions"):
        restore(models, data.lq[:2], data.captions[:1], sched, 2, g,
                np.random.default_rng(0))


class _CountingUnet:
    def __init__(self, unet):
        self.unet, self.calls = unet, 0

    @property
    def c_lat(self):
        return self.unet.c_lat

    def set_trainable(self, flag):
        self.unet.set_trainable(flag)

    def predict_eps(self, f_a, t, c, daam_sink=None):
        self.calls += 1
        return self.unet.predict_eps(f_a, t, c, daam_sink)


def test_guidance_scale_one_skips_unconditional_branch(world):
    from dataclasses import replace
    cfg, manifest, vae, models, data, sched = world
    counter = _CountingUnet(models.unet)
    spy = replace(models, unet=counter)
    restore(spy, data.lq[:1], data.captions[:1], sched, steps=3,
            guidance=GuidanceConfig(scale=1.0), rng=np.random.default_rng(6))
    assert counter.calls == 3
    counter.calls = 0
    restore(spy, data.lq[:1], data.captions[:1], sched, steps=3,
            guidance=GuidanceConfig(scale=5.0), rng=np.random.default_rng(6))
    assert counter.calls == 6


def test_guidance_scale_one_equals_condition_only_sampler(world):
    cfg, manifest, vae, models, data, sched = world
    for m in models.groups().values():
        m.set_trainable(False)
    feats = models.lq_encoder(Tensor(data.lq[:1]))
    f_feat = feats.f_lq
    c = models.text.embed_batch(data.captions[:1])

    def cond_only(x_scaled, t):
        tb = np.full(x_scaled.shape[0], t, dtype=np.int64)
        f_a = models.align(Tensor(x_scaled), f_feat)
        return models.unet.predict_eps(f_a, tb, c).data

    shape = (1, cfg.c_lat, 4, 4)
    ref = euler_sample(cond_only, shape, sched, 3, rng=np.random.default_rng(8))
    eps_fn = make_eps_fn(models, f_feat, data.captions[:1], GuidanceConfig(scale=1.0))
    out = euler_sample(eps_fn, shape, sched, 3, rng=np.random.default_rng(8))
    np.testing.assert_array_equal(ref, out)


def test_restore_daam_capture(world):
    cfg, manifest, vae, models, data, sched = world
    sink = []
    restore(models, data.lq[:1], data.captions[:1], sched, steps=3,
            guidance=GuidanceConfig(scale=5.0), rng=np.random.default_rng(9),
            daam_sink=sink)
    # 5 cross-attention sites x 3 steps, conditional branch only
    assert len(sink) == 15
    for name, h, w, wmap in sink:
        assert wmap.shape[0] == 1 and wmap.shape[1] == h * w
        np.testing.assert_allclose(wmap.sum(axis=-1), 1.0, atol=1e-5)


# -- run_eval -----------------------------------------------------------------------

def test_run_eval_report_and_outputs(world, tmp_path):
    cfg, manifest, vae, models, data, sched = world
    rep = run_eval(models, manifest, sched, steps=2, guidance=GuidanceConfig(5.0),
                   seed=11, level="II", out_dir=tmp_path / "out", capture_daam=True)
    assert rep.level == "II"
    assert rep.indices == [0, 1, 2]
    assert all(np.isfinite(p) for p in rep.psnr_values)
    assert all(-1.0 <= s <= 1.0 for s in rep.ssim_values)
    files = {p.name for p in (tmp_path / "out").iterdir()}
    assert "report.txt" in files
    assert {f"restored_{i:05d}.ppm" for i in range(3)} <= files
    assert any(f.startswith("daam_00000_tok") for f in files)
    saved = (tmp_path / "out" / "report.txt").read_text()
    assert saved == rep.to_text()


def test_run_eval_deterministic(world):
    cfg, manifest, vae, models, data, sched = world
    g = GuidanceConfig(scale=5.0)
    r1 = run_eval(models, manifest, sched, steps=2, guidance=g, seed=11)
    r2 = run_eval(models, manifest, sched, steps=2, guidance=g, seed=11)
    assert r1.psnr_values == r2.psnr_values
    assert r1.ssim_values == r2.ssim_values
    r3 = run_eval(models, manifest, sched, steps=2, guidance=g, seed=12)
    assert r3.psnr_values != r1.psnr_values


def test_run_eval_empty_manifest(world, tmp_path):
    from latentsr.degrade import build_dataset
    cfg = world[0]
    manifest = build_dataset(0, "I", seed=0, out_dir=tmp_path / "empty",
                             size=cfg.image_size)
    models = world[3]
    sched = world[5]
    rep = run_eval(models, manifest, sched, steps=2, guidance=GuidanceConfig(1.0),
                   seed=0, out_dir=tmp_path / "out")
    assert rep.indices == []
    assert (tmp_path / "out" / "report.txt").read_text() == ""
