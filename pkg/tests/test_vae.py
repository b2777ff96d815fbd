"""Autoencoder contracts: shapes, one-pass tap, pretraining behavior."""

import numpy as np
import pytest

from latentsr import rng as rngmod
from latentsr.degrade import render, synth_spec
from latentsr.tensor import ShapeError, Tensor
from latentsr.vae import Vae, pretrain_vae, reconstruction_loss


def _model(seed=0, **kw):
    return Vae(rngmod.stream(seed, "vae-test"), **kw)


def _images(n, size, seed):
    rng = rngmod.stream(seed, "vae-test-data")
    return np.stack([render(synth_spec(rng, size)) for _ in range(n)])


def test_encode_shape_contract():
    vae = _model()
    feats = vae.encode(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
    assert feats.f_lq.shape == (1, 64, 8, 8)
    assert feats.x0.shape == (1, 4, 8, 8)


def test_encode_deterministic():
    vae = _model()
    img = Tensor(_images(1, 32, seed=1))
    a, b = vae.encode(img), vae.encode(img)
    assert np.array_equal(a.f_lq.data, b.f_lq.data)
    assert np.array_equal(a.x0.data, b.x0.data)


def test_encode_single_pass_probe():
    vae = _model()
    before = vae.encoder.encode_calls
    feats = vae.encode(Tensor(np.zeros((2, 3, 16, 16), dtype=np.float32)))
    assert vae.encoder.encode_calls == before + 1
    assert feats.f_lq.shape[2:] == feats.x0.shape[2:] == (4, 4)


def test_encode_rejects_indivisible():
    vae = _model()
    with pytest.raises(ShapeError, match="divisible"):
        vae.encode(Tensor(np.zeros((1, 3, 30, 30), dtype=np.float32)))
    with pytest.raises(ShapeError):
        vae.encode(Tensor(np.zeros((1, 4, 32, 32), dtype=np.float32)))


def test_decode_shape_and_width_check():
    vae = _model()
    out = vae.decode(Tensor(np.zeros((1, 4, 8, 8), dtype=np.float32)))
    assert out.shape == (1, 3, 32, 32)
    with pytest.raises(ShapeError):
        vae.decode(Tensor(np.zeros((1, 5, 8, 8), dtype=np.float32)))


def test_zero_latent_decodes_finite():
    out = _model().decode(Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)))
    assert np.all(np.isfinite(out.data))


def test_reconstruction_loss_zero_at_identity():
    x = Tensor(_images(2, 16, seed=2))
    assert reconstruction_loss(x, x).item() == 0.0


def test_reconstruction_loss_positive_off_identity():
    x = Tensor(_images(1, 16, seed=3))
    y = Tensor(x.data + 0.25)
    assert reconstruction_loss(y, x).item() > 0.0


def test_one_iteration_changes_params():
    imgs = _images(4, 16, seed=4)
    model = pretrain_vae(imgs, rng_root=5, iters=1, batch=2, lr=1e-3,
                         c_pen=16, base=8)
    fresh = Vae(rngmod.stream(5, "vae-init"), c_pen=16, base=8)
    sq = 0.0
    for name, p in model.named_params().items():
        sq += float(((p.data - fresh.named_params()[name].data) ** 2).sum())
    assert np.sqrt(sq) > 0.0


def test_pretrain_rerun_bit_identical():
    imgs = _images(4, 16, seed=6)
    log1, log2 = [], []
    m1 = pretrain_vae(imgs, rng_root=7, iters=3, batch=2, lr=1e-3,
                      c_pen=16, base=8, log=log1)
    m2 = pretrain_vae(imgs, rng_root=7, iters=3, batch=2, lr=1e-3,
                      c_pen=16, base=8, log=log2)
    assert log1 == log2
    for name, p in m1.named_params().items():
        assert np.array_equal(p.data, m2.named_params()[name].data)


@pytest.fixture(scope="module")
def trained_small_vae():
    imgs = _images(24, 16, seed=8)
    log = []
    model = pretrain_vae(imgs, rng_root=9, iters=300, batch=4, lr=2e-3,
                         c_pen=16, base=8, log=log)
    return model, imgs, log


def test_training_curve_decreases(trained_small_vae):
    _, _, log = trained_small_vae
    early = float(np.mean(log[:50]))
    late = float(np.mean(log[-50:]))
    assert late < early


def test_penultimate_tap_outpredicts_latent(trained_small_vae):
    # linear probes for 4x-downsampled gray intensity; the wide tap should
    # carry more recoverable image information than the compressed latent
    model, imgs, _ = trained_small_vae
    feats = model.encode(Tensor(imgs))
    gray = imgs.mean(axis=1)
    b, h, w = gray.shape
    target = gray.reshape(b, h // 4, 4, w // 4, 4).mean(axis=(2, 4)).reshape(-1)

    def probe_error(f):
        x = f.transpose(0, 2, 3, 1).reshape(-1, f.shape[1])
        x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
        coef, *_ = np.linalg.lstsq(x, target, rcond=None)
        return float(((x @ coef - target) ** 2).mean())

    err_tap = probe_error(feats.f_lq.data.astype(np.float64))
    err_lat = probe_error(feats.x0.data.astype(np.float64))
    assert err_tap < err_lat
