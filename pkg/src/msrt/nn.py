"""Layers built from ndtensor ops: linear, attention, encoder block, positional table."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ndtensor as nt
from .ndtensor import Tensor


class ConfigError(ValueError):
    """A layer or model was configured with inconsistent sizes."""


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                   fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Parameter container.  Parameters are discovered from attributes in
    definition order: ``Tensor`` leaves, child modules, and lists of modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = glorot_uniform(rng, (d_out, d_in), d_in, d_out)
        self.bias = zeros_param(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    """``x @ weight.T + bias`` applied to every row of ``x[..., Din]``."""
    d_out, d_in = layer.weight.shape
    if x.shape[-1] != d_in:
        raise nt.DimensionError(f"linear: input width {x.shape[-1]} != layer input {d_in}")
    lead = x.shape[:-1]
    flat = nt.reshape(x, (-1, d_in)) if x.ndim != 2 else x
    y = nt.add_bias(nt.matmul(flat, nt.transpose(layer.weight)), layer.bias)
    return nt.reshape(y, lead + (d_out,)) if x.ndim != 2 else y


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes, no masking.

    Leading axes (batch, heads) pass through unchanged.
    """
    return nt.scaled_dot_attention(q, k, v)


def attention_composed(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """:func:`attention` spelled out with matmul/softmax primitives."""
    if q.shape != k.shape or q.shape != v.shape:
        raise nt.DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    d = q.shape[-1]
    scores = nt.matmul(nt.scale(q, 1.0 / math.sqrt(d)), nt.transpose(k))
    return nt.matmul(nt.softmax(scores, axis=-1), v)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """The softmax weight matrix of :func:`attention`, as a plain array."""
    with nt.no_grad():
        scores = nt.matmul(Tensor(q) * (1.0 / math.sqrt(q.shape[-1])), nt.transpose(Tensor(k)))
        return nt.softmax(scores, axis=-1).data


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if n_heads < 1 or d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def __call__(self, x: Tensor) -> Tensor:
        return mha_forward(self, x)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # [..., T, D] -> [..., H, T, D/H]
    *lead, T, D = x.shape
    x = nt.reshape(x, tuple(lead) + (T, n_heads, D // n_heads))
    n = len(lead)
    axes = list(range(n)) + [n + 1, n, n + 2]
    return nt.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, T, dh = x.shape
    n = len(lead)
    axes = list(range(n)) + [n + 1, n, n + 2]
    return nt.reshape(nt.transpose(x, axes), tuple(lead) + (T, H * dh))


def mha_forward(mha: MultiHeadAttention, x: Tensor) -> Tensor:
    """Self-attention over the token axis of ``x[..., T, d_model]``."""
    if x.shape[-1] != mha.d_model:
        raise nt.DimensionError(f"mha: token width {x.shape[-1]} != d_model {mha.d_model}")
    q = _split_heads(linear_forward(mha.q_proj, x), mha.n_heads)
    k = _split_heads(linear_forward(mha.k_proj, x), mha.n_heads)
    v = _split_heads(linear_forward(mha.v_proj, x), mha.n_heads)
    return linear_forward(mha.out_proj, _merge_heads(attention(q, k, v)))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = ones_param(d)
        self.beta = zeros_param(d)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nt.layer_norm(x, self.gamma, self.beta, self.eps)


class EncoderLayer(Module):
    """Pre-norm block: ``y = x + MHA(LN(x))``, ``z = y + FFN(LN(y))``."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d_model)
        self.attention = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return encoder_layer_forward(self, x)


def encoder_layer_forward(layer: EncoderLayer, x: Tensor) -> Tensor:
    y = nt.add(x, mha_forward(layer.attention, layer.norm1(x)))
    h = nt.relu(linear_forward(layer.ff1, layer.norm2(y)))
    return nt.add(y, linear_forward(layer.ff2, h))


def positional_encoding(T: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal table ``[T, d_model]``: sine on even columns, cosine on odd.

    Column pair ``i`` has angular rate ``10000 ** (-2i / d_model)``, so
    wavelengths run geometrically from ``2*pi`` up towards ``10000 * 2*pi``.
    """
    if d_model < 2 or d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    rate = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((T, d_model))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate)
    return table


def global_mean_pool(x: Tensor) -> Tensor:
    """Average over the token axis (second to last)."""
    if x.ndim < 2 or x.shape[-2] == 0:
        raise nt.DimensionError(f"global_mean_pool: no tokens in input of shape {x.shape}")
    return nt.mean(x, axis=-2)
