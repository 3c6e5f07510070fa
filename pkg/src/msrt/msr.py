"""Multi-scale residual module: 1-D residual backbone (C2..C5) plus an FPN
top-down merge (P2..P5) and the token builder that feeds the encoder."""

from __future__ import annotations

import numpy as np

from . import ndtensor as nt
from .ndtensor import Tensor
from .nn import ConfigError, Module, glorot_uniform, positional_encoding, zeros_param

MIN_INPUT_LEN = 32


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0):
        self.weight = glorot_uniform(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel)
        self.bias = zeros_param(c_out)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return nt.conv1d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


def _even_crop(x: Tensor) -> Tensor:
    # a stride-2 stage halves exactly: 125 -> 62, 62 -> 31
    L = x.shape[-1]
    return nt.narrow(x, -1, 0, L - 1) if L % 2 else x


class ResidualBlock(Module):
    """Two kernel-3 convolutions with an identity or 1x1 projection skip."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv1d(c_in, c_out, 3, rng, stride=stride, pad=1)
        self.conv2 = Conv1d(c_out, c_out, 3, rng, stride=1, pad=1)
        self.stride = stride
        if stride != 1 or c_in != c_out:
            self.proj = Conv1d(c_in, c_out, 1, rng, stride=stride, pad=0)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.stride == 2:
            x = _even_crop(x)
        h = self.conv2(nt.relu(self.conv1(x)))
        skip = x if self.proj is None else self.proj(x)
        return nt.relu(nt.add(h, skip))


class ResidualStage(Module):
    def __init__(self, c_in: int, c_out: int, n_blocks: int, stride: int,
                 rng: np.random.Generator):
        self.blocks = [ResidualBlock(c_in if i == 0 else c_out, c_out,
                                     stride if i == 0 else 1, rng) for i in range(n_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def stage_lengths(input_len: int, n_stages: int = 4) -> list[int]:
    """Feature lengths of C2..C5: stem halves with ceiling, each stage with floor."""
    L = (input_len + 2 * 3 - 7) // 2 + 1
    out = []
    for _ in range(n_stages):
        L //= 2
        out.append(L)
    return out


class Backbone(Module):
    def __init__(self, stem_channels: int, stage_channels: tuple[int, ...], blocks_per_stage: int,
                 rng: np.random.Generator):
        self.stem = Conv1d(1, stem_channels, 7, rng, stride=2, pad=3)
        chans = (stem_channels,) + tuple(stage_channels)
        self.stages = [ResidualStage(chans[i], chans[i + 1], blocks_per_stage, 2, rng)
                       for i in range(len(stage_channels))]

    def __call__(self, x: Tensor) -> list[Tensor]:
        return backbone_forward(self, x)


def backbone_forward(backbone: Backbone, x: Tensor) -> list[Tensor]:
    """Map ``x[..., 1, L]`` to the stage outputs ``[C2, C3, C4, C5]``."""
    if x.shape[-1] < MIN_INPUT_LEN:
        raise ConfigError(f"input length {x.shape[-1]} is shorter than {MIN_INPUT_LEN} samples")
    if x.shape[-2] != 1:
        raise nt.DimensionError(f"backbone expects one input channel, got shape {x.shape}")
    h = nt.relu(backbone.stem(x))
    feats = []
    for stage in backbone.stages:
        h = stage(h)
        feats.append(h)
    return feats


class FpnMerge(Module):
    """Lateral 1x1 convolutions plus a kernel-3 merge convolution per level."""

    def __init__(self, in_channels: tuple[int, ...], fpn_channels: int, rng: np.random.Generator):
        self.fpn_channels = fpn_channels
        self.lateral = [Conv1d(c, fpn_channels, 1, rng) for c in in_channels]
        # the coarsest level has nothing above it to merge
        self.merge = [Conv1d(fpn_channels, fpn_channels, 3, rng, pad=1)
                      for _ in in_channels[:-1]]

    def __call__(self, feats: list[Tensor], top_down: bool = True) -> list[Tensor]:
        return fpn_forward(self, feats, top_down)


def fpn_forward(fpn: FpnMerge, feats: list[Tensor], top_down: bool = True) -> list[Tensor]:
    """Top-down merge of ``[C2..C5]`` into ``[P2..P5]``.

    ``top_down=False`` zeroes the upsampled term, leaving each level with only
    its own lateral input (used to probe the additive structure).
    """
    if len(feats) != len(fpn.lateral):
        raise nt.DimensionError(f"fpn: expected {len(fpn.lateral)} levels, got {len(feats)}")
    for c, lat in zip(feats, fpn.lateral):
        if c.shape[-2] != lat.weight.shape[1]:
            raise nt.DimensionError(
                f"fpn: level has {c.shape[-2]} channels, lateral expects {lat.weight.shape[1]}")
    for fine, coarse in zip(feats[:-1], feats[1:]):
        if coarse.shape[-1] > fine.shape[-1]:
            raise RuntimeError(f"fpn: level lengths not monotone ({fine.shape[-1]} then {coarse.shape[-1]})")
    out = [fpn.lateral[-1](feats[-1])]
    for i in range(len(feats) - 2, -1, -1):
        lat = fpn.lateral[i](feats[i])
        if top_down:
            lat = nt.add(nt.upsample_nearest(out[0], feats[i].shape[-1]), lat)
        out.insert(0, fpn.merge[i](lat))
    return out


class TokenBuilder(Module):
    """Per-level 1x1 projection to ``d_model`` and concatenation along the token axis."""

    def __init__(self, n_levels: int, fpn_channels: int, d_model: int, rng: np.random.Generator,
                 levels: str = "all"):
        if levels not in ("all", "p2"):
            raise ConfigError(f"token levels must be 'all' or 'p2', got {levels!r}")
        self.levels = levels
        self.d_model = d_model
        n = n_levels if levels == "all" else 1
        self.proj = [Conv1d(fpn_channels, d_model, 1, rng) for _ in range(n)]

    def __call__(self, pyramid: list[Tensor]) -> Tensor:
        return tokens_from_pyramid(self, pyramid)


def tokens_from_pyramid(builder: TokenBuilder, pyramid: list[Tensor]) -> Tensor:
    """``[P2..P5]`` (each ``[..., C, len]``) to tokens ``[..., T, d_model]`` with position added."""
    levels = pyramid if builder.levels == "all" else pyramid[:1]
    parts = []
    for p, proj in zip(levels, builder.proj):
        t = proj(p)
        parts.append(nt.transpose(t))
    tokens = nt.concat(parts, axis=-2) if len(parts) > 1 else parts[0]
    pe = positional_encoding(tokens.shape[-2], builder.d_model)
    return nt.add(tokens, Tensor(np.broadcast_to(pe, tokens.shape)))
