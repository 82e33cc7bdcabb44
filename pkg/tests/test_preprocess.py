import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radmamba.preprocess import (
    ChanDsConfig,
    ConvBnParams,
    PatchGeometry,
    chan_ds,
    chan_ds_output_shape,
    patch_embed,
    pooling_plan,
    pos_encode,
    segment,
    sinusoidal_table,
    unsegment,
)
from radmamba.tensor import ShapeError, Tensor


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def identity_block(channels=1, k=3):
    w = np.zeros((channels, channels, k, k))
    for c in range(channels):
        w[c, c, k // 2, k // 2] = 1.0
    return ConvBnParams(t64(w), t64(np.zeros(channels)), t64(np.ones(channels)), t64(np.zeros(channels)))


class TestChanDs:
    @pytest.mark.parametrize(
        "factors,out",
        [((2, 2), (1, 112, 112)), ((2, 8), (1, 112, 28)), ((2, 32), (1, 112, 7)), ((8, 2), (1, 28, 112)), ((1, 1), (1, 224, 224))],
    )
    def test_output_extents(self, factors, out):
        cfg = ChanDsConfig(factors=factors)
        x = t64(np.random.default_rng(0).random((1, 224, 224)))
        assert chan_ds(x, cfg, [identity_block()]).shape == out

    def test_two_blocks_sixteen_channels(self):
        cfg = ChanDsConfig(n_blocks=2, channels=16, factors=(2, 2))
        rng = np.random.default_rng(1)
        blocks = [
            ConvBnParams(t64(rng.normal(size=(16, 3, 3, 3))), t64(np.zeros(16)), t64(np.ones(16)), t64(np.zeros(16))),
            ConvBnParams(t64(rng.normal(size=(16, 16, 3, 3))), t64(np.zeros(16)), t64(np.ones(16)), t64(np.zeros(16))),
        ]
        assert chan_ds(t64(rng.random((2, 3, 32, 32))), cfg, blocks).shape == (2, 16, 16, 16)

    def test_pooling_plan_split(self):
        assert pooling_plan(ChanDsConfig(factors=(2, 32))) == [
            ("maxpool2d", (2, 2)),
            ("maxpool1d_time", (1, 4)),
            ("avgpool1d_time", (1, 4)),
        ]
        assert pooling_plan(ChanDsConfig(factors=(2, 8))) == [("maxpool2d", (2, 2)), ("maxpool1d_time", (1, 4))]
        assert pooling_plan(ChanDsConfig(factors=(1, 1))) == []
        assert ("avgpool1d_time", (1, 2)) in pooling_plan(ChanDsConfig(factors=(2, 8), use_avgpool=True))

    @settings(max_examples=50, deadline=None)
    @given(st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4, 8, 16, 32]))
    def test_plan_realises_factors_exactly(self, rh, rw):
        ph = pw = 1
        for _, (a, b) in pooling_plan(ChanDsConfig(factors=(rh, rw))):
            ph, pw = ph * a, pw * b
        assert (ph, pw) == (rh, rw)

    def test_non_divisible(self):
        with pytest.raises(ShapeError):
            chan_ds_output_shape((1, 224, 224), ChanDsConfig(factors=(3, 2)))
        with pytest.raises(ShapeError):
            chan_ds(t64(np.zeros((1, 10, 10))), ChanDsConfig(factors=(4, 4)), [identity_block()])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([(2, 2), (2, 8), (4, 4), (8, 2), (2, 32)]))
    def test_monotone_bounded(self, seed, factors):
        x = np.random.default_rng(seed).normal(size=(1, 32, 64))
        y = chan_ds(t64(x), ChanDsConfig(factors=factors), [identity_block()], batchnorm=False)
        assert y.data.max() <= x.max() + 1e-12
        assert y.data.min() >= x.min() - 1e-12

    def test_batchnorm_eval_uses_running_stats(self):
        blk = identity_block()
        blk.running_mean[:] = 0.5
        blk.running_var[:] = 4.0
        x = np.full((1, 1, 4, 4), 2.5)
        y = chan_ds(t64(x), ChanDsConfig(factors=(1, 1)), [blk], training=False)
        np.testing.assert_allclose(y.data, (2.5 - 0.5) / np.sqrt(4.0 + 1e-5))


class TestSegment:
    def test_doppler_aligned_columns(self):
        x = t64([[[1, 2, 3], [4, 5, 6]]])
        np.testing.assert_array_equal(segment(x, PatchGeometry.doppler_aligned()).data, [[1, 4], [2, 5], [3, 6]])

    def test_rectangular_top_left(self):
        x = t64(np.arange(16).reshape(1, 4, 4))
        p = segment(x, PatchGeometry.rectangular(2, 2))
        assert p.shape == (4, 4)
        np.testing.assert_array_equal(p.data[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(p.data[1], [2, 3, 6, 7])

    def test_time_aligned_rows(self):
        x = t64(np.arange(6).reshape(1, 2, 3))
        np.testing.assert_array_equal(segment(x, PatchGeometry.time_aligned()).data, [[0, 1, 2], [3, 4, 5]])

    def test_uog20_shape(self):
        g = PatchGeometry.doppler_aligned()
        assert segment(t64(np.zeros((1, 112, 7))), g).shape == (7, 112)
        assert g.n_patches(1, 112, 7) == 7 and g.patch_dim(1, 112, 7) == 112

    def test_channel_major_flatten(self):
        x = t64(np.arange(8).reshape(2, 2, 2))
        p = segment(x, PatchGeometry.doppler_aligned())
        np.testing.assert_array_equal(p.data[0], [0, 2, 4, 6])

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            segment(t64(np.zeros((1, 6, 6))), PatchGeometry.rectangular(4, 4))

    def test_time_shift_shifts_patches(self):
        x = np.random.default_rng(0).random((2, 5, 9))
        g = PatchGeometry.doppler_aligned()
        shifted = np.roll(x, -1, axis=2)
        a, b = segment(t64(x), g).data, segment(t64(shifted), g).data
        np.testing.assert_array_equal(b[:-1], a[1:])

    @settings(max_examples=80, deadline=None)
    @given(
        st.integers(1, 3),
        st.integers(1, 4),
        st.integers(1, 4),
        st.integers(1, 3),
        st.integers(1, 3),
        st.sampled_from(["doppler_aligned", "rectangular", "time_aligned"]),
    )
    def test_round_trip(self, C, I, J, hs, ws, kind):
        H, W = I * hs, J * ws
        x = np.random.default_rng(C * 100 + H * 10 + W).random((2, C, H, W))
        g = PatchGeometry.rectangular(hs, ws) if kind == "rectangular" else PatchGeometry(kind)
        back = unsegment(segment(t64(x), g), g, (C, H, W))
        np.testing.assert_array_equal(back.data, x)


class TestEmbed:
    def test_identity_weights(self):
        x = t64(np.random.default_rng(0).random((5, 6)))
        np.testing.assert_array_equal(patch_embed(x, t64(np.eye(6)), t64(np.zeros(6))).data, x.data)

    def test_zero_input_gives_bias(self):
        b = np.arange(4.0)
        y = patch_embed(t64(np.zeros((3, 5))), t64(np.ones((5, 4))), t64(b))
        np.testing.assert_array_equal(y.data, np.tile(b, (3, 1)))

    def test_shape(self):
        assert patch_embed(t64(np.zeros((7, 112))), t64(np.zeros((112, 24))), t64(np.zeros(24))).shape == (7, 24)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            patch_embed(t64(np.zeros((7, 111))), t64(np.zeros((112, 24))))


class TestPositionEncoding:
    def test_first_row(self):
        y = pos_encode(t64(np.zeros((3, 6))))
        np.testing.assert_array_equal(y.data[0], [0, 1, 0, 1, 0, 1])

    def test_sin_one(self):
        assert sinusoidal_table(2, 4)[1, 0] == pytest.approx(0.8414709848078965, abs=1e-12)

    def test_direct_formula(self):
        pe = sinusoidal_table(9, 8)
        for n in range(9):
            for i in range(4):
                assert pe[n, 2 * i] == pytest.approx(np.sin(n / 10000 ** (2 * i / 8)), abs=1e-14)
                assert pe[n, 2 * i + 1] == pytest.approx(np.cos(n / 10000 ** (2 * i / 8)), abs=1e-14)

    def test_bounded(self):
        assert np.abs(sinusoidal_table(500, 32)).max() <= 1.0

    def test_odd_dim(self):
        with pytest.raises(ShapeError):
            pos_encode(t64(np.zeros((3, 5))))
