import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birddet import autodiff as ad
from birddet.cbam import (ChannelAttentionParams, ConvLayer, SpatialAttentionParams, ToyNet,
                          cbam_apply, cbam_from_tensors, cbam_tensors, channel_attention,
                          insert_cbam, spatial_attention)
from birddet.gradcheck import cbam_case, finite_diff_check
from birddet.tensorio import load_tensors, save_tensors


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def random_params(c, r, seed):
    rng = np.random.default_rng(seed)
    cp = ChannelAttentionParams(rng.normal(size=(c // r, c)), rng.normal(size=(c, c // r)), r)
    sp = SpatialAttentionParams(rng.normal(size=(1, 2, 7, 7)) * 0.3, rng.normal(size=1))
    return cp, sp


def channel_oracle(f, cp):
    def mlp(d):
        return cp.w1 @ np.maximum(cp.w0 @ d, 0)
    return sig(mlp(f.mean(axis=(1, 2))) + mlp(f.max(axis=(1, 2))))[:, None, None]


def spatial_oracle(f, sp):
    maps = np.stack([f.mean(axis=0), f.max(axis=0)])
    _, h, w = maps.shape
    padded = np.pad(maps, ((0, 0), (3, 3), (3, 3)))
    out = np.empty((1, h, w))
    for y in range(h):
        for x in range(w):
            out[0, y, x] = np.sum(padded[:, y:y + 7, x:x + 7] * sp.kernel[0]) + sp.bias[0]
    return sig(out)


class TestChannelAttention:
    def test_zero_weights_half(self):
        f = np.random.default_rng(0).normal(size=(4, 5, 5))
        out = channel_attention(f, ChannelAttentionParams.zeros(4, 2)).value
        np.testing.assert_array_equal(out, np.full((4, 1, 1), 0.5))

    def test_hand_example(self):
        f = np.zeros((2, 1, 2))
        f[0, 0] = [0.0, 2.0]  # avg 1, max 2
        cp = ChannelAttentionParams(np.array([[1.0, 0.0]]), np.array([[1.0], [0.0]]), 2)
        out = channel_attention(f, cp).value.ravel()
        np.testing.assert_allclose(out, [0.95257, 0.5], atol=5e-6)
        np.testing.assert_allclose(out[0], sig(3.0), rtol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
    def test_range_and_shape(self, seed, scale):
        rng = np.random.default_rng(seed)
        cp, _ = random_params(8, 4, seed)
        out = channel_attention(rng.normal(size=(8, 3, 4)) * scale, cp).value
        assert out.shape == (8, 1, 1)
        assert np.all((out > 0) & (out < 1))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1.0, 1e6))
    def test_range_large_inputs(self, seed, scale):
        # float64 sigmoid saturates to exactly 0 or 1 past |x| ~ 37
        cp, _ = random_params(8, 4, seed)
        out = channel_attention(np.random.default_rng(seed).normal(size=(8, 3, 4)) * scale, cp).value
        assert np.all((out >= 0) & (out <= 1))

    def test_reduction_must_divide(self):
        with pytest.raises(ValueError):
            ChannelAttentionParams.init(6, reduction=4)
        with pytest.raises(ValueError):
            ChannelAttentionParams(np.zeros((2, 4)), np.zeros((4, 3)), 2)

    def test_default_reduction(self):
        cp = ChannelAttentionParams.init(32)
        assert cp.reduction == 16 and cp.w0.shape == (2, 32) and cp.w1.shape == (32, 2)

    def test_init_bounds(self):
        cp = ChannelAttentionParams.init(32, 4, rng=1)
        assert np.abs(cp.w0).max() <= 1 / np.sqrt(32)
        assert np.abs(cp.w1).max() <= 1 / np.sqrt(8)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(8, 4, 4))
        cp, _ = random_params(8, 2, seed)
        perm = rng.permutation(8)
        permuted = ChannelAttentionParams(cp.w0[:, perm], cp.w1[perm, :], 2)
        np.testing.assert_allclose(channel_attention(f[perm], permuted).value,
                                   channel_attention(f, cp).value[perm], rtol=1e-13)

    def test_matches_oracle(self):
        f = np.random.default_rng(3).normal(size=(6, 5, 4))
        cp, _ = random_params(6, 3, 3)
        np.testing.assert_allclose(channel_attention(f, cp).value, channel_oracle(f, cp), rtol=1e-13)


class TestSpatialAttention:
    def test_zero_kernel_half(self):
        out = spatial_attention(np.random.default_rng(0).normal(size=(3, 6, 6)),
                                SpatialAttentionParams.zeros()).value
        np.testing.assert_array_equal(out, np.full((1, 6, 6), 0.5))

    @pytest.mark.parametrize("c", [1, 3, 16])
    def test_shape_independent_of_channels(self, c):
        out = spatial_attention(np.ones((c, 5, 9)), SpatialAttentionParams.init(rng=0)).value
        assert out.shape == (1, 5, 9)

    @pytest.mark.parametrize("c", [0.0, 0.01, -0.02])
    def test_constant_input_interior(self, c):
        sp = SpatialAttentionParams(np.ones((1, 2, 7, 7)), np.zeros(1))
        out = spatial_attention(np.full((2, 9, 9), c), sp).value
        np.testing.assert_allclose(out[0, 4, 4], sig(98 * c), rtol=1e-14)
        if c == 0.0:
            assert out[0, 4, 4] == 0.5

    def test_matches_oracle(self):
        f = np.random.default_rng(4).normal(size=(3, 8, 6))
        _, sp = random_params(4, 2, 4)
        np.testing.assert_allclose(spatial_attention(f, sp).value, spatial_oracle(f, sp), rtol=1e-12)

    def test_kernel_shape_enforced(self):
        with pytest.raises(ValueError):
            SpatialAttentionParams(np.zeros((1, 2, 3, 3)), np.zeros(1))


class TestCbamApply:
    def test_identity_attention(self):
        f = np.random.default_rng(0).uniform(0.1, 1.0, size=(2, 4, 4))
        # positive input and huge weights drive both sigmoids to exactly 1.0
        cp = ChannelAttentionParams(np.ones((1, 2)), np.full((2, 1), 1e4), 2)
        sp = SpatialAttentionParams(np.zeros((1, 2, 7, 7)), np.array([1e4]))
        np.testing.assert_array_equal(cbam_apply(f, cp, sp).value, f)

    def test_zero_weights_quarter(self):
        f = np.random.default_rng(1).normal(size=(4, 5, 5))
        out = cbam_apply(f, ChannelAttentionParams.zeros(4, 2), SpatialAttentionParams.zeros()).value
        np.testing.assert_allclose(out, 0.25 * f, rtol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_compositional_oracle(self, seed):
        f = np.random.default_rng(seed + 10).normal(size=(4, 6, 5))
        cp, sp = random_params(4, 2, seed)
        mc = channel_oracle(f, cp)
        ms = spatial_oracle(mc * f, sp)
        np.testing.assert_allclose(cbam_apply(f, cp, sp).value, f * mc * ms, rtol=1e-12, atol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 50))
    def test_never_increases_magnitude(self, seed, scale):
        f = np.random.default_rng(seed).normal(size=(4, 5, 5)) * scale
        cp, sp = random_params(4, 2, seed)
        assert np.all(np.abs(cbam_apply(f, cp, sp).value) <= np.abs(f))

    def test_gradcheck(self):
        build, params = cbam_case(rng=0)
        assert finite_diff_check(build, params, 1e-5) < 1e-4


def toy_net(seed=0):
    return ToyNet(3, [ConvLayer.init(3, 8, rng=seed), ConvLayer.init(8, 4, rng=seed + 1, activation="none")])


class TestInsertCbam:
    @pytest.mark.parametrize("pos", [0, 1, 2])
    def test_shape_preserved(self, pos):
        net = toy_net()
        x = np.random.default_rng(0).normal(size=(3, 8, 8))
        spliced = insert_cbam(net, pos, reduction=1 if pos == 0 else 2)
        assert len(spliced.layers) == 3
        assert spliced.forward(x).shape == net.forward(x).shape == (4, 8, 8)

    def test_zero_cbam_scales_quarter(self):
        net = toy_net()
        x = np.random.default_rng(1).normal(size=(3, 8, 8))
        spliced = insert_cbam(net, 2, params=(ChannelAttentionParams.zeros(4, 2), SpatialAttentionParams.zeros()))
        np.testing.assert_allclose(spliced.forward(x).value, 0.25 * net.forward(x).value, rtol=1e-14)

    @pytest.mark.parametrize("pos", [-1, 3])
    def test_out_of_range(self, pos):
        with pytest.raises(IndexError):
            insert_cbam(toy_net(), pos)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            insert_cbam(toy_net(), 1, params=(ChannelAttentionParams.zeros(4, 2), SpatialAttentionParams.zeros()))

    def test_spliced_gradcheck(self):
        net = insert_cbam(toy_net(2), 1, reduction=2, rng=5)
        x = np.random.default_rng(3).normal(size=(3, 6, 6))

        def build(g, p):
            return ad.mean(net.forward(p["x"], graph=g, params={k: p[k] for k in p if k != "x"}))

        params = {"x": x, **net.tensors()}
        assert finite_diff_check(build, params, 1e-5) < 1e-4


def test_params_container_round_trip(tmp_path):
    cp, sp = random_params(8, 4, 0)
    save_tensors(tmp_path / "c.bdtc", cbam_tensors(cp, sp))
    tensors, _ = load_tensors(tmp_path / "c.bdtc")
    assert sorted(tensors) == ["cbam.spatial.bias", "cbam.spatial.kernel", "cbam.w0", "cbam.w1"]
    cp2, sp2 = cbam_from_tensors(tensors, 4)
    np.testing.assert_array_equal(cp2.w0, cp.w0)
    np.testing.assert_array_equal(sp2.kernel, sp.kernel)
