from __future__ import annotations

import math

import numpy as np
import pytest

from msrt import ndtensor as nt
from msrt import nn
from msrt.ndtensor import Tensor
from msrt.nn import ConfigError

from _gradcheck import check, weighted_sum


@pytest.fixture(autouse=True)
def fresh_graph():
    nt.reset_graph()
    yield


def _set(param: Tensor, value) -> None:
    param.data[...] = value


def _identity_mha(d, heads):
    mha = nn.MultiHeadAttention(d, heads, np.random.default_rng(0))
    for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
        _set(lin.weight, np.eye(d))
        _set(lin.bias, 0.0)
    return mha


class TestLinear:
    def test_identity(self):
        lin = nn.Linear(3, 3, np.random.default_rng(0))
        _set(lin.weight, np.eye(3))
        x = np.random.default_rng(1).normal(size=(4, 3))
        np.testing.assert_array_equal(lin(Tensor(x)).data, x)

    def test_bias_only(self):
        lin = nn.Linear(3, 2, np.random.default_rng(0))
        _set(lin.weight, 0.0)
        _set(lin.bias, [1.5, -2.0])
        y = lin(Tensor(np.random.default_rng(1).normal(size=(5, 3)))).data
        np.testing.assert_array_equal(y, np.tile([1.5, -2.0], (5, 1)))

    def test_matches_matmul_plus_bias(self):
        lin = nn.Linear(3, 2, np.random.default_rng(2))
        _set(lin.bias, [0.1, 0.2])
        x = np.random.default_rng(3).normal(size=(2, 3))
        ref = x @ lin.weight.data.T + lin.bias.data
        np.testing.assert_allclose(lin(Tensor(x)).data, ref, atol=1e-14)

    def test_leading_axes(self):
        lin = nn.Linear(4, 2, np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(2, 5, 4))
        y = lin(Tensor(x)).data
        np.testing.assert_allclose(y[1], lin(Tensor(x[1])).data, atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(nt.DimensionError):
            nn.Linear(3, 2, np.random.default_rng(0))(Tensor(np.zeros((2, 4))))

    def test_glorot_bounds(self):
        lin = nn.Linear(30, 20, np.random.default_rng(0))
        assert np.abs(lin.weight.data).max() <= math.sqrt(6 / 50)
        np.testing.assert_array_equal(lin.bias.data, 0.0)


class TestAttention:
    def test_single_token(self):
        q, k, v = (Tensor(np.random.default_rng(i).normal(size=(1, 4))) for i in range(3))
        np.testing.assert_allclose(nn.attention(q, k, v).data, v.data, atol=1e-15)

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(0)
        k = np.tile(rng.normal(size=(1, 3)), (4, 1))
        v = rng.normal(size=(4, 3))
        out = nn.attention(Tensor(rng.normal(size=(4, 3))), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (4, 1)), atol=1e-14)

    def test_two_token_hand_case(self):
        q, k, v = np.array([[1.0], [2.0]]), np.array([[0.5], [-1.0]]), np.array([[3.0], [7.0]])
        out = nn.attention(Tensor(q), Tensor(k), Tensor(v)).data
        for i in range(2):
            s = np.exp([q[i, 0] * 0.5, q[i, 0] * -1.0])
            assert out[i, 0] == pytest.approx((s[0] * 3 + s[1] * 7) / s.sum(), abs=1e-14)

    def test_fused_equals_composed(self):
        rng = np.random.default_rng(4)
        q, k, v = (Tensor(rng.normal(size=(2, 3, 7, 4)) * 3) for _ in range(3))
        np.testing.assert_allclose(nn.attention(q, k, v).data,
                                   nn.attention_composed(q, k, v).data, atol=1e-13)

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        w = nn.attention_weights(rng.normal(size=(6, 4)) * 4, rng.normal(size=(6, 4)) * 4)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_row_logit_shift_leaves_weights(self):
        # adding c to all logits of one query row is the same as shifting that
        # row's scores; realise it with an extra key dimension
        rng = np.random.default_rng(6)
        q, k = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        qa = np.hstack([q, np.zeros((5, 1))])
        qa[2, 3] = 2.0
        ka = np.hstack([k, np.ones((5, 1))])
        w_shift = nn.attention_weights(qa, ka)
        w_plain = nn.attention_weights(np.hstack([q, np.zeros((5, 1))]), ka)
        np.testing.assert_allclose(w_shift, w_plain, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(nt.DimensionError):
            nn.attention(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))))

    def test_gradients(self):
        worst = max(check(lambda q, k, v: weighted_sum(nn.attention_composed(q, k, v)),
                          [np.random.default_rng(s + i).normal(size=(4, 3)) for i in range(3)])
                    for s in range(5))
        assert worst < 1e-5


class TestMultiHeadAttention:
    def test_single_head_identity_reduces_to_attention(self):
        x = np.random.default_rng(0).normal(size=(5, 4))
        out = _identity_mha(4, 1)(Tensor(x)).data
        ref = nn.attention(Tensor(x), Tensor(x), Tensor(x)).data
        np.testing.assert_allclose(out, ref, atol=1e-14)

    @pytest.mark.parametrize("T", [1, 3, 17])
    def test_shape(self, T):
        mha = nn.MultiHeadAttention(12, 6, np.random.default_rng(0))
        assert mha(Tensor(np.zeros((T, 12)))).shape == (T, 12)

    def test_divisibility(self):
        with pytest.raises(ConfigError):
            nn.MultiHeadAttention(64, 6, np.random.default_rng(0))

    def test_per_head_oracle(self):
        rng = np.random.default_rng(1)
        mha = nn.MultiHeadAttention(4, 2, rng)
        for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
            _set(lin.bias, rng.normal(size=4) * 0.1)
        x = rng.normal(size=(3, 4))
        proj = lambda lin: x @ lin.weight.data.T + lin.bias.data  # noqa: E731
        q, k, v = proj(mha.q_proj), proj(mha.k_proj), proj(mha.v_proj)
        heads = []
        for h in range(2):
            sl = slice(2 * h, 2 * h + 2)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(2)
            p = np.exp(s - s.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            heads.append(p @ v[:, sl])
        ref = np.hstack(heads) @ mha.out_proj.weight.data.T + mha.out_proj.bias.data
        np.testing.assert_allclose(mha(Tensor(x)).data, ref, atol=1e-13)

    def test_batched_matches_per_record(self):
        mha = nn.MultiHeadAttention(6, 3, np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(2, 5, 6))
        yb = mha(Tensor(x)).data
        np.testing.assert_allclose(yb[1], mha(Tensor(x[1])).data, atol=1e-13)


class TestEncoderLayer:
    def _layer(self, d=8, heads=2, seed=0):
        return nn.EncoderLayer(d, heads, 4 * d, np.random.default_rng(seed))

    def test_zeroed_output_projections_give_identity(self):
        layer = self._layer()
        for lin in (layer.attention.out_proj, layer.ff2):
            _set(lin.weight, 0.0)
            _set(lin.bias, 0.0)
        x = np.random.default_rng(1).normal(size=(6, 8))
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_stacked_shape(self):
        x = Tensor(np.random.default_rng(1).normal(size=(5, 8)))
        for s in range(3):
            x = self._layer(seed=s)(x)
        assert x.shape == (5, 8)

    def test_permutation_equivariance(self):
        layer = self._layer()
        rng = np.random.default_rng(2)
        x = rng.normal(size=(7, 8))
        pe = nn.positional_encoding(7, 8)
        perm = rng.permutation(7)
        y = layer(Tensor(x + pe)).data
        y_perm = layer(Tensor(x[perm] + pe[perm])).data
        np.testing.assert_allclose(y_perm, y[perm], atol=1e-13)

    def test_input_gradient(self):
        layer = self._layer(d=4, heads=2)
        x = np.random.default_rng(3).normal(size=(5, 4))
        assert check(lambda t: weighted_sum(layer(t)), [x]) < 1e-5

    def test_parameter_gradient(self):
        layer = self._layer(d=4, heads=2)
        x = Tensor(np.random.default_rng(4).normal(size=(5, 4)))
        w0 = layer.ff1.weight.data.copy()

        def f(w):
            layer.ff1.weight = w
            return weighted_sum(layer(x))

        assert check(f, [w0]) < 1e-5


class TestPositionalEncoding:
    def test_row_zero(self):
        np.testing.assert_array_equal(nn.positional_encoding(3, 6)[0], [0, 1, 0, 1, 0, 1])

    def test_range(self):
        pe = nn.positional_encoding(500, 48)
        assert pe.min() >= -1 and pe.max() <= 1

    def test_row_one_first_pair(self):
        np.testing.assert_allclose(nn.positional_encoding(2, 8)[1, :2], [math.sin(1), math.cos(1)],
                                   atol=1e-15)

    def test_geometric_wavelengths(self):
        d = 16
        pe = nn.positional_encoding(2, d)
        rates = np.arcsin(pe[1, 0::2])  # pos 1, all rates < pi/2
        np.testing.assert_allclose(rates, 10000.0 ** (-np.arange(0, d, 2) / d), atol=1e-12)

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            nn.positional_encoding(4, 7)


class TestPool:
    def test_single_token(self):
        np.testing.assert_array_equal(nn.global_mean_pool(Tensor([[1.0, 2.0]])).data, [1, 2])

    def test_constant(self):
        np.testing.assert_array_equal(nn.global_mean_pool(Tensor(np.full((4, 3), 2.5))).data, 2.5)

    def test_symmetric_pair(self):
        np.testing.assert_array_equal(nn.global_mean_pool(Tensor([[0.0, 2.0], [2.0, 0.0]])).data,
                                      [1, 1])

    def test_empty(self):
        with pytest.raises(nt.DimensionError):
            nn.global_mean_pool(Tensor(np.zeros((0, 3))))


class TestModule:
    def test_parameter_discovery_order_and_count(self):
        layer = nn.EncoderLayer(8, 2, 32, np.random.default_rng(0))
        names = [n for n, _ in layer.named_parameters()]
        assert names[0] == "norm1.gamma" and names[-1] == "ff2.bias"
        assert layer.num_parameters() == 2 * 8 * 2 + 4 * (8 * 8 + 8) + (8 * 32 + 32) + (32 * 8 + 8)

    def test_zero_grad(self):
        lin = nn.Linear(2, 2, np.random.default_rng(0))
        nt.backward(nt.sum(lin(Tensor(np.ones((1, 2))))))
        assert lin.weight.grad is not None
        lin.zero_grad()
        assert all(p.grad is None for p in lin.parameters())
