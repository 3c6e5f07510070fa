"""Cross-entropy loss, Adam, and the deterministic mini-batch training loop."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ndtensor as nt
from .config import ValidationError
from .metrics import DegenerateMetricWarning, confusion_matrix, epoch_average_f1, f1_scores
from .ndtensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 10
    epochs: int = 12
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ValidationError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ValidationError(f"epochs must be a positive integer, got {self.epochs}")
        if self.learning_rate < 0 or self.adam_eps <= 0:
            raise ValidationError("learning_rate must be >= 0 and adam_eps > 0")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in (0, 1), got {getattr(self, name)}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise nt.DimensionError(f"{len(labels)} labels for logits of shape {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    picked = nt.pick(nt.log_softmax(logits, axis=-1), labels)
    return nt.scale(nt.mean(picked), -1.0)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              cfg: TrainConfig) -> None:
    """One in-place Adam update with bias correction.  ``None`` grads count as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise nt.DimensionError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise nt.DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass
class TrainResult:
    model: object
    history: list[dict[str, float]] = field(default_factory=list)
    steps: int = 0

    @property
    def epoch_average_f1(self) -> float:
        return epoch_average_f1([h["macro_f1"] for h in self.history])


def _macro_f1(y_true, y_pred, n_classes) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMetricWarning)
        return f1_scores(confusion_matrix(y_true, y_pred, n_classes)).macro_f1


def train(model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
          eval_data: tuple[np.ndarray, np.ndarray] | None = None,
          on_epoch: Callable[[dict[str, float]], None] | None = None) -> TrainResult:
    """Mini-batch Adam on ``(x [N, L], y [N])``.

    Records are reshuffled every epoch with a generator seeded from
    ``cfg.seed``; the last batch may be short.  Per-epoch training metrics
    come from the predictions made during that epoch.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} records but {len(y)} labels")
    n_classes = model.config.n_classes
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if x.ndim == 2:
        x = x[:, None, :]

    params = model.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(x))
        loss_sum = 0.0
        preds = np.empty(len(x), dtype=np.int64)
        for lo in range(0, len(x), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            nt.reset_graph()
            model.zero_grad()
            logits = model.forward(Tensor(x[idx]))
            loss = cross_entropy(logits, y[idx])
            preds[lo:lo + len(idx)] = np.argmax(logits.data, axis=1)
            loss_sum += loss.item() * len(idx)
            nt.backward(loss)
            adam_step(params, [p.grad for p in params], state, cfg)
            result.steps += 1
        truth = y[order]
        row = {"epoch": epoch, "loss": loss_sum / len(x),
               "accuracy": float((preds == truth).mean()),
               "macro_f1": _macro_f1(truth, preds, n_classes)}
        if eval_data is not None:
            from .encoder import predict
            ex, ey = eval_data
            ep, _ = predict(model, np.asarray(ex)[:, None, :] if np.ndim(ex) == 2 else ex)
            row["eval_accuracy"] = float((ep == ey).mean())
            row["eval_macro_f1"] = _macro_f1(ey, ep, n_classes)
        result.history.append(row)
        log.info("epoch %d loss %.4f acc %.4f (%.1fs)", epoch, row["loss"], row["accuracy"],
                 time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(row)
    return result
