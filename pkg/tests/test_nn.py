"""Building blocks: attention, transformer block, norms, resampling."""

import numpy as np
import pytest

from latentsr import rng as rngmod
from latentsr.gradcheck import check_gradients
from latentsr.nn import (
    Conv2d,
    CrossAttention,
    Downsample2x,
    GroupNorm,
    LayerNorm,
    Linear,
    ResBlock,
    TransformerBlock,
    Upsample2x,
    attention,
)
from latentsr.tensor import ShapeError, Tensor, mean, sum_


@pytest.fixture
def rng():
    return rngmod.stream(77, "test-nn")


def randt(rng, shape, scale=1.0, requires_grad=False):
    return Tensor((rng.normal(size=shape) * scale).astype(np.float32), requires_grad=requires_grad)


class TestAttention:
    def test_single_key_broadcasts_v(self, rng):
        q = randt(rng, (2, 5, 4))
        k = randt(rng, (2, 1, 4))
        v = randt(rng, (2, 1, 4))
        out, w = attention(q, k, v)
        np.testing.assert_allclose(w.data, 1.0, atol=1e-7)
        for l in range(5):
            np.testing.assert_allclose(out.data[:, l], v.data[:, 0], rtol=1e-6)

    def test_identical_keys_ignore_query(self, rng):
        k_row = rng.normal(size=(1, 1, 4)).astype(np.float32)
        k = Tensor(np.repeat(k_row, 3, axis=1))
        v = randt(rng, (1, 3, 4))
        out1, w = attention(randt(rng, (1, 2, 4)), k, v)
        out2, _ = attention(randt(rng, (1, 2, 4)), k, v)
        np.testing.assert_allclose(w.data, 1 / 3, atol=1e-6)
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-6)
        np.testing.assert_allclose(out1.data[0, 0], v.data[0].mean(axis=0), rtol=1e-5)

    def test_matches_naive_double_loop_oracle(self, rng):
        q, k, v = randt(rng, (2, 3, 4)), randt(rng, (2, 3, 4)), randt(rng, (2, 3, 4))
        out, w = attention(q, k, v)
        scale = 1.0 / np.sqrt(4)
        for b in range(2):
            for i in range(3):
                scores = np.array(
                    [float(np.dot(q.data[b, i], k.data[b, j])) * scale for j in range(3)]
                )
                e = np.exp(scores - scores.max())
                probs = e / e.sum()
                expected = sum(probs[j] * v.data[b, j] for j in range(3))
                np.testing.assert_allclose(out.data[b, i], expected, atol=1e-5)
                np.testing.assert_allclose(w.data[b, i], probs, atol=1e-5)

    def test_rows_sum_to_one_and_nonnegative(self, rng):
        _, w = attention(randt(rng, (2, 6, 8), 2.0), randt(rng, (2, 4, 8), 2.0), randt(rng, (2, 4, 8)))
        assert w.shape == (2, 6, 4)
        assert np.all(w.data >= 0)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            attention(randt(rng, (1, 2, 4)), randt(rng, (1, 3, 5)), randt(rng, (1, 3, 5)))


class TestTransformerBlock:
    def test_zero_init_is_identity(self, rng):
        block = TransformerBlock(8, rng)
        x = randt(rng, (2, 5, 8))
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_zero_init_identity_with_cross_attention(self, rng):
        block = TransformerBlock(8, rng, d_ctx=6)
        x, ctx = randt(rng, (2, 5, 8)), randt(rng, (2, 3, 6))
        np.testing.assert_array_equal(block(x, ctx).data, x.data)

    def test_output_shape_contract(self, rng):
        block = TransformerBlock(32, rng)
        assert block(randt(rng, (2, 16, 32))).shape == (2, 16, 32)

    def test_trained_block_gradcheck(self, rng):
        block = TransformerBlock(8, rng)
        # Un-zero the residual projections so gradients flow everywhere.
        for name, p in block.named_params().items():
            if np.all(p.data == 0) and p.data.ndim == 2:
                p.data = (rng.normal(size=p.data.shape) * 0.2).astype(np.float32)
        x = randt(rng, (1, 4, 8), requires_grad=True)
        rep = check_gradients(lambda t: block(t), [x], rng)
        assert rep.max_error < 1e-3

    def test_batch_permutation_equivariance(self, rng):
        block = TransformerBlock(8, rng, heads=2)
        for name, p in block.named_params().items():
            if np.all(p.data == 0) and p.data.ndim == 2:
                p.data = (rng.normal(size=p.data.shape) * 0.2).astype(np.float32)
        x = randt(rng, (3, 4, 8))
        out = block(x).data
        perm = [2, 0, 1]
        out_perm = block(Tensor(x.data[perm]))
        np.testing.assert_allclose(out_perm.data, out[perm], atol=1e-6)

    def test_missing_context_rejected(self, rng):
        block = TransformerBlock(8, rng, d_ctx=6)
        with pytest.raises(ShapeError, match="context"):
            block(randt(rng, (1, 4, 8)))


class TestCrossAttentionCapture:
    def test_capture_collects_weight_maps(self, rng):
        cross = CrossAttention(8, 6, rng)
        sink: list = []
        cross.capture = sink
        x, ctx = randt(rng, (2, 5, 8)), randt(rng, (2, 3, 6))
        cross(x, ctx)
        cross(x, ctx)
        assert len(sink) == 2
        assert sink[0].shape == (2, 5, 3)
        assert np.all(sink[0] >= 0)
        np.testing.assert_allclose(sink[0].sum(axis=-1), 1.0, atol=1e-6)


class TestNorms:
    def test_layernorm_constant_rows_to_beta(self, rng):
        ln = LayerNorm(6)
        out = ln(Tensor(np.full((2, 6), 3.0, dtype=np.float32)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-2)

    def test_groupnorm_constant_input_zero_pre_affine(self, rng):
        gn = GroupNorm(8, groups=4)
        out = gn(Tensor(np.full((1, 8, 3, 3), 2.5, dtype=np.float32)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-2)

    def test_groupnorm_matches_two_pass_oracle(self, rng):
        gn = GroupNorm(8, groups=2, eps=1e-5)
        x = randt(rng, (2, 8, 4, 4), 1.5)
        out = gn(x).data
        xd = x.data.astype(np.float64)
        for b in range(2):
            for g in range(2):
                block = xd[b, 4 * g : 4 * (g + 1)]
                mu = block.mean()
                var = ((block - mu) ** 2).mean()
                expected = (block - mu) / np.sqrt(var + 1e-5)
                np.testing.assert_allclose(out[b, 4 * g : 4 * (g + 1)], expected, atol=1e-5)

    def test_groupnorm_indivisible_channels(self):
        with pytest.raises(ShapeError, match="divisible"):
            GroupNorm(6, groups=4)

    def test_groupnorm_gradcheck(self, rng):
        gn = GroupNorm(4, groups=2)
        x = randt(rng, (2, 4, 3, 3), requires_grad=True)
        rep = check_gradients(lambda t: gn(t), [x], rng)
        assert rep.max_error < 1e-3


class TestResampling:
    def test_upsample2x_doubles_spatial(self, rng):
        up = Upsample2x(3, 5, rng)
        assert up(randt(rng, (1, 3, 4, 6))).shape == (1, 5, 8, 12)

    def test_downsample2x_halves_spatial(self, rng):
        down = Downsample2x(3, 5, rng)
        assert down(randt(rng, (1, 3, 8, 6))).shape == (1, 5, 4, 3)

    def test_downsample2x_rejects_odd(self, rng):
        with pytest.raises(ShapeError, match="odd"):
            Downsample2x(3, 3, rng)(randt(rng, (1, 3, 5, 4)))


class TestResBlock:
    def test_zero_init_identity_when_widths_match(self, rng):
        block = ResBlock(8, 8, rng)
        x = randt(rng, (2, 8, 4, 4))
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_time_embedding_requires_argument(self, rng):
        block = ResBlock(4, 4, rng, t_dim=16)
        with pytest.raises(ShapeError, match="time"):
            block(randt(rng, (1, 4, 4, 4)))

    def test_gradcheck_with_time_embedding(self, rng):
        block = ResBlock(4, 4, rng, t_dim=8)
        block.conv2.weight.data = (rng.normal(size=block.conv2.weight.shape) * 0.2).astype(np.float32)
        x = randt(rng, (1, 4, 4, 4), requires_grad=True)
        t = randt(rng, (1, 8), requires_grad=True)
        rep = check_gradients(lambda x, t: block(x, t), [x, t], rng)
        assert rep.max_error < 1e-2


class TestModulePlumbing:
    def test_named_params_stable_dotted_names(self, rng):
        block = TransformerBlock(8, rng, d_ctx=6)
        names = set(block.named_params())
        assert "attn.q.weight" in names
        assert "cross.k.weight" in names
        assert "ff.down.bias" in names

    def test_state_dict_roundtrip(self, rng):
        a = TransformerBlock(8, rng)
        b = TransformerBlock(8, rngmod.stream(1, "other"))
        b.load_state_dict(a.state_dict())
        x = randt(rng, (1, 3, 8))
        np.testing.assert_array_equal(a(x).data, b(x).data)

    def test_load_rejects_mismatched_keys(self, rng):
        a = Linear(4, 4, rng)
        with pytest.raises(KeyError):
            a.load_state_dict({"weight": np.zeros((4, 4), dtype=np.float32)})

    def test_set_trainable_toggles_requires_grad(self, rng):
        lin = Linear(4, 2, rng)
        lin.set_trainable(False)
        assert not any(p.requires_grad for p in lin.named_params().values())
        lin.set_trainable(True)
        assert all(p.requires_grad for p in lin.named_params().values())

    def test_linear_matches_numpy_affine(self, rng):
        lin = Linear(5, 3, rng)
        x = randt(rng, (4, 5))
        expected = x.data @ lin.weight.data.T + lin.bias.data
        np.testing.assert_allclose(lin(x).data, expected, rtol=1e-5, atol=1e-6)
