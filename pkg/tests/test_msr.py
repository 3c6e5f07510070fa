from __future__ import annotations

import numpy as np
import pytest

from msrt import msr
from msrt import ndtensor as nt
from msrt.ndtensor import Tensor
from msrt.nn import ConfigError

from _gradcheck import check, weighted_sum


@pytest.fixture(autouse=True)
def fresh_graph():
    nt.reset_graph()
    yield


def _backbone(stem=16, chans=(32, 64, 128, 256), seed=0):
    return msr.Backbone(stem, chans, 2, np.random.default_rng(seed))


def _params(module):
    return dict(module.named_parameters())


class TestBackbone:
    def test_default_lengths_and_channels(self):
        feats = _backbone()(Tensor(np.random.default_rng(0).normal(size=(1, 1, 1000))))
        assert [f.shape[-1] for f in feats] == [250, 125, 62, 31]
        assert [f.shape[-2] for f in feats] == [32, 64, 128, 256]

    @pytest.mark.parametrize("L", [32, 64, 128, 333, 512, 1000])
    def test_stage_lengths_formula(self, L):
        feats = _backbone(4, (4, 4, 4, 4))(Tensor(np.zeros((1, L))))
        assert [f.shape[-1] for f in feats] == msr.stage_lengths(L)

    def test_zero_input_zero_features(self):
        feats = _backbone(4, (4, 8, 8, 8))(Tensor(np.zeros((2, 1, 100))))
        for f in feats:
            np.testing.assert_array_equal(f.data, 0.0)

    def test_positive_cone_linearity(self):
        bb = _backbone(4, (4, 8, 8, 8), seed=3)
        for _, p in bb.named_parameters():
            p.data[...] = np.abs(p.data)  # biases are zero already
        x = np.abs(np.random.default_rng(1).normal(size=(1, 1, 200))) + 0.1
        f1 = bb(Tensor(x))
        f2 = bb(Tensor(2 * x))
        for a, b in zip(f1, f2):
            assert a.data.min() > 0
            np.testing.assert_allclose(b.data, 2 * a.data, rtol=1e-12)

    def test_too_short(self):
        with pytest.raises(ConfigError):
            _backbone(4, (4, 4, 4, 4))(Tensor(np.zeros((1, 31))))

    def test_channel_count(self):
        with pytest.raises(nt.DimensionError):
            _backbone(4, (4, 4, 4, 4))(Tensor(np.zeros((2, 64))))  # read as 2 channels

    def test_residual_block_projection_only_when_needed(self):
        rng = np.random.default_rng(0)
        assert msr.ResidualBlock(8, 8, 1, rng).proj is None
        assert msr.ResidualBlock(8, 16, 1, rng).proj is not None
        assert msr.ResidualBlock(8, 8, 2, rng).proj is not None

    def test_identity_skip(self):
        block = msr.ResidualBlock(3, 3, 1, np.random.default_rng(0))
        for p in (block.conv2.weight, block.conv2.bias):
            p.data[...] = 0.0
        x = np.abs(np.random.default_rng(1).normal(size=(3, 10)))
        np.testing.assert_array_equal(block(Tensor(x)).data, x)


class TestFpn:
    def _fpn_and_feats(self, D=8, L=1000, seed=0):
        bb = _backbone(4, (4, 8, 8, 16), seed)
        feats = bb(Tensor(np.random.default_rng(seed).normal(size=(1, 1, L))))
        return msr.FpnMerge((4, 8, 8, 16), D, np.random.default_rng(seed + 1)), feats

    def test_shapes(self):
        fpn, feats = self._fpn_and_feats(D=5)
        pyr = fpn(feats)
        assert [p.shape[-1] for p in pyr] == [250, 125, 62, 31]
        assert all(p.shape[-2] == 5 for p in pyr)

    def test_hand_oracle_two_levels(self):
        fpn = msr.FpnMerge((1, 1), 1, np.random.default_rng(0))
        fpn.lateral[0].weight.data[...] = 2.0
        fpn.lateral[0].bias.data[...] = 0.5
        fpn.lateral[1].weight.data[...] = -1.0
        fpn.lateral[1].bias.data[...] = 0.0
        fpn.merge[0].weight.data[...] = np.array([1.0, 0.0, -1.0]).reshape(1, 1, 3)
        fpn.merge[0].bias.data[...] = 0.25
        c2 = np.array([[1.0, 2.0, 3.0, 4.0]])
        c3 = np.array([[10.0, 20.0]])
        p2, p3 = fpn([Tensor(c2), Tensor(c3)])
        np.testing.assert_array_equal(p3.data, [[-10.0, -20.0]])
        s = np.array([-10.0, -10.0, -20.0, -20.0]) + 2 * c2[0] + 0.5  # upsample + lateral
        sp = np.pad(s, 1)
        expected = np.array([sp[j] - sp[j + 2] for j in range(4)]) + 0.25
        np.testing.assert_array_equal(p2.data[0], expected)

    def test_zero_laterals_leave_top_down_path(self):
        fpn, feats = self._fpn_and_feats()
        for lat in fpn.lateral[:-1]:
            lat.weight.data[...] = 0.0
            lat.bias.data[...] = 0.0
        pyr = fpn(feats)
        for i in range(3):
            up = nt.upsample_nearest(pyr[i + 1], feats[i].shape[-1])
            np.testing.assert_allclose(pyr[i].data, fpn.merge[i](up).data, atol=1e-13)

    def test_linearity_with_zero_biases(self):
        fpn, feats = self._fpn_and_feats()
        for _, p in fpn.named_parameters():
            if p.ndim == 1:
                p.data[...] = 0.0
        a = -1.7
        base = fpn(feats)
        scaled = fpn([nt.scale(f, a) for f in feats])
        for p, q in zip(base, scaled):
            np.testing.assert_allclose(q.data, a * p.data, atol=1e-12)

    def test_top_down_removal_changes_all_but_p5(self):
        fpn, feats = self._fpn_and_feats()
        with_td = fpn(feats, top_down=True)
        without = fpn(feats, top_down=False)
        np.testing.assert_array_equal(with_td[3].data, without[3].data)
        for i in range(3):
            assert not np.allclose(with_td[i].data, without[i].data)

    def test_non_monotone_lengths(self):
        fpn = msr.FpnMerge((1, 1), 1, np.random.default_rng(0))
        with pytest.raises(RuntimeError):
            fpn([Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 5)))])

    def test_level_count(self):
        fpn = msr.FpnMerge((1, 1, 1), 1, np.random.default_rng(0))
        with pytest.raises(nt.DimensionError):
            fpn([Tensor(np.zeros((1, 4)))])


class TestTokens:
    def _pipeline(self, L, levels="all", d_model=8):
        rng = np.random.default_rng(0)
        bb = msr.Backbone(4, (4, 4, 8, 8), 1, rng)
        fpn = msr.FpnMerge((4, 4, 8, 8), 6, rng)
        tb = msr.TokenBuilder(4, 6, d_model, rng, levels)
        return bb, fpn, tb

    def test_token_count_1000(self):
        bb, fpn, tb = self._pipeline(1000)
        tokens = tb(fpn(bb(Tensor(np.zeros((2, 1, 1000))))))
        assert tokens.shape == (2, 468, 8)

    def test_token_count_512(self):
        bb, fpn, tb = self._pipeline(512)
        pyr = fpn(bb(Tensor(np.zeros((1, 512)))))
        assert [p.shape[-1] for p in pyr] == [128, 64, 32, 16]
        assert tb(pyr).shape == (240, 8)

    def test_p2_only_flag(self):
        bb, fpn, tb = self._pipeline(1000, levels="p2")
        assert tb(fpn(bb(Tensor(np.zeros((1, 1000)))))).shape == (250, 8)

    def test_first_tokens_come_from_p2_only(self):
        bb, fpn, tb = self._pipeline(1000)
        pyr = fpn(bb(Tensor(np.random.default_rng(1).normal(size=(1, 1000)))))
        base = tb(pyr).data
        bumped = tb([pyr[0]] + [nt.add_scalar(p, 5.0) for p in pyr[1:]]).data
        np.testing.assert_array_equal(base[:250], bumped[:250])
        assert not np.allclose(base[250:], bumped[250:])

    def test_end_to_end_gradient_length_64(self):
        rng = np.random.default_rng(2)
        bb = msr.Backbone(2, (2, 3, 3, 4), 1, rng)
        fpn = msr.FpnMerge((2, 3, 3, 4), 3, rng)
        tb = msr.TokenBuilder(4, 3, 4, rng)
        for _, p in list(bb.named_parameters()) + list(fpn.named_parameters()):
            if p.ndim == 1:
                p.data[...] = rng.normal(size=p.shape) * 0.1
        x = rng.normal(size=(1, 64))
        assert check(lambda t: weighted_sum(tb(fpn(bb(t)))), [x]) < 1e-5
        w = fpn.merge[0].weight.data.copy()

        def f(weight):
            fpn.merge[0].weight = weight
            return weighted_sum(tb(fpn(bb(Tensor(x)))))

        assert check(f, [w]) < 1e-5
