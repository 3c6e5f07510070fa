"""The MSRT classifier and its patchifier ablation baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .msr import Backbone, Conv1d, FpnMerge, TokenBuilder, fpn_forward, backbone_forward
from .ndtensor import Tensor
from .nn import ConfigError, EncoderLayer, LayerNorm, Linear, Module, global_mean_pool, \
    linear_forward, positional_encoding

CLASS_NAMES = ("-CG", "+CG", "-PBP", "+PBP", "-NBE", "+NBE", "NBE", "MP", "CG-IR", "SW")


@dataclass
class ModelConfig:
    arch: str = "msrt"  # "msrt" or "baseline"
    input_len: int = 1000
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    fpn_channels: int = 64
    d_model: int = 48
    n_heads: int = 6
    n_layers: int = 2
    d_ff: int = 0  # 0 means 4 * d_model
    n_classes: int = 10
    token_levels: str = "all"
    patch_size: int = 16
    seed: int = 0

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    def validate(self) -> None:
        if self.arch not in ("msrt", "baseline"):
            raise ConfigError(f"arch must be 'msrt' or 'baseline', got {self.arch!r}")
        counts = dict(input_len=self.input_len, stem_channels=self.stem_channels,
                      blocks_per_stage=self.blocks_per_stage, fpn_channels=self.fpn_channels,
                      d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
                      n_classes=self.n_classes, patch_size=self.patch_size)
        for name, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_ff < 0 or any(c < 1 for c in self.stage_channels) or len(self.stage_channels) != 4:
            raise ConfigError("stage_channels must be four positive counts and d_ff >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for the positional table, got {self.d_model}")
        if self.token_levels not in ("all", "p2"):
            raise ConfigError(f"token_levels must be 'all' or 'p2', got {self.token_levels!r}")
        if self.arch == "msrt" and self.input_len < 32:
            raise ConfigError(f"input_len {self.input_len} is shorter than 32 samples")
        if self.arch == "baseline" and self.input_len < self.patch_size:
            raise ConfigError(f"input_len {self.input_len} is shorter than one patch")


class _EncoderHead(Module):
    def _init_head(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        self.encoder_layers = [EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_width, rng)
                               for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.n_classes, rng)

    def _classify(self, tokens: Tensor) -> Tensor:
        for layer in self.encoder_layers:
            tokens = layer(tokens)
        return linear_forward(self.head, global_mean_pool(self.final_norm(tokens)))

    def _check_input(self, batch: Tensor) -> Tensor:
        if batch.ndim == 2:
            batch = nt.reshape(batch, (batch.shape[0], 1, batch.shape[1]))
        if batch.ndim != 3 or batch.shape[1] != 1:
            raise nt.DimensionError(f"expected a batch shaped [B, 1, L], got {batch.shape}")
        if batch.shape[-1] != self.config.input_len:
            raise nt.DimensionError(
                f"record length {batch.shape[-1]} does not match configured input_len "
                f"{self.config.input_len}")
        return batch

    def __call__(self, batch: Tensor) -> Tensor:
        return self.forward(batch)


class MsrtModel(_EncoderHead):
    """Residual backbone + FPN tokens -> pre-norm encoder stack -> mean pool -> linear head."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = Backbone(config.stem_channels, config.stage_channels,
                                 config.blocks_per_stage, rng)
        self.fpn = FpnMerge(config.stage_channels, config.fpn_channels, rng)
        self.tokens = TokenBuilder(len(config.stage_channels), config.fpn_channels,
                                   config.d_model, rng, config.token_levels)
        self._init_head(config, rng)

    def pyramid(self, batch: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        batch = self._check_input(batch)
        feats = backbone_forward(self.backbone, batch)
        return feats, fpn_forward(self.fpn, feats)

    def forward(self, batch: Tensor) -> Tensor:
        _, pyr = self.pyramid(batch)
        return self._classify(self.tokens(pyr))


class BaselineTransformer(_EncoderHead):
    """Same encoder and head as :class:`MsrtModel`, with a strided patch
    convolution in place of the multi-scale residual front end."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        p = config.patch_size
        self.patchify = Conv1d(1, config.d_model, p, rng, stride=p)
        self._init_head(config, rng)

    def forward(self, batch: Tensor) -> Tensor:
        batch = self._check_input(batch)
        tokens = nt.transpose(self.patchify(batch))
        pe = positional_encoding(tokens.shape[-2], self.config.d_model)
        tokens = nt.add(tokens, Tensor(np.broadcast_to(pe, tokens.shape)))
        return self._classify(tokens)


def build_model(config: ModelConfig) -> MsrtModel | BaselineTransformer:
    return MsrtModel(config) if config.arch == "msrt" else BaselineTransformer(config)


def forward(model: MsrtModel | BaselineTransformer, batch) -> Tensor:
    return model.forward(nt.as_tensor(batch))


def baseline_transformer_forward(config: ModelConfig, batch) -> Tensor:
    cfg = ModelConfig(**{**config.__dict__, "arch": "baseline"})
    return BaselineTransformer(cfg).forward(nt.as_tensor(batch))


def predict(model, batch, chunk: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Class indices (lowest index wins ties) and softmax probabilities."""
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    probs = []
    with nt.no_grad():
        for lo in range(0, len(x), chunk):
            logits = model.forward(Tensor(x[lo:lo + chunk]))
            probs.append(nt.softmax(logits, axis=-1).data)
    p = np.concatenate(probs) if probs else np.zeros((0, model.config.n_classes))
    return np.argmax(p, axis=-1), p


def predict_logits(model, batch, chunk: int = 50) -> np.ndarray:
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    out = []
    with nt.no_grad():
        for lo in range(0, len(x), chunk):
            out.append(model.forward(Tensor(x[lo:lo + chunk])).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))
