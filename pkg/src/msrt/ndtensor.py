"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
calling thread's active :class:`Graph`.  Nodes are recorded in execution
order, so the tape is already topologically sorted and :func:`backward` only
has to sweep it in reverse.  After one sweep the graph is consumed; a fresh
one is installed for the next forward pass.

Ops accept an optional leading batch axis where noted (``conv1d`` on
``[B, Cin, L]``, ``matmul`` on stacks with identical leading dims).  Apart
from bias-over-last-axis and scalars there is no broadcasting.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_ids = itertools.count()
_local = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class GraphStateError(RuntimeError):
    """The differentiation graph is in a state that forbids the request."""


class Graph:
    """Ordered record of differentiable ops for one forward/backward cycle."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


class _Node:
    __slots__ = ("kind", "parents", "out_id", "backward")

    def __init__(self, kind: str, parents: tuple[Tensor, ...], out_id: int,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.kind = kind
        self.parents = parents
        self.out_id = out_id
        self.backward = backward


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None or g.consumed:
        g = Graph()
        _local.graph = g
    return g


def reset_graph() -> Graph:
    """Drop whatever the active graph has recorded and start a new one."""
    _local.graph = Graph()
    return _local.graph


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """A float64 array that may take part in a differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _own: bool = False):
        if _own:
            self.data: np.ndarray = data
        else:
            self.data = np.array(data, dtype=DTYPE, copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, kind: str) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if data.dtype != DTYPE:
        data = data.astype(DTYPE)
    out = Tensor(data, requires_grad=needs, _own=True)
    if needs:
        g = current_graph()
        for p in parents:
            if p._graph is not None and p._graph is not g:
                raise GraphStateError(
                    f"{kind}: operand {p.node_id} belongs to a graph that was already consumed")
        g.nodes.append(_Node(kind, parents, out.node_id, backward))
        out._graph = g
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf that ``loss`` depends on.

    Gradients add into existing ``.grad`` buffers, so callers zero them between
    steps.  The graph is consumed afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphStateError("loss does not depend on any tensor with requires_grad")
    g = loss._graph
    if g is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if g.consumed:
        raise GraphStateError("graph already consumed by a previous backward()")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(g.nodes):
        gout = grads.pop(node.out_id, None)
        if gout is None:
            continue
        for p, gi in zip(node.parents, node.backward(gout)):
            if gi is None or not p.requires_grad:
                continue
            if p._graph is None:
                p.grad = gi.copy() if p.grad is None else p.grad + gi
            elif p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + gi
            else:
                grads[p.node_id] = gi
    g.consumed = True
    g.nodes.clear()


# --------------------------------------------------------------------------
# elementwise and shape ops


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,), "add_scalar")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` of shape ``[D]`` broadcast over the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _result(np.array(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(a.data.sum(axis=ax), (a,), bw, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return scale(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or \
                t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(f"concat: {t.shape} incompatible with {tensors[0].shape} on axis {ax}")
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise DimensionError(f"narrow: [{start},{stop}) outside axis of length {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _result(a.data[idx].copy(), (a,), bw, "narrow")


def upsample_nearest(x: Tensor, target_len: int) -> Tensor:
    """Nearest-neighbour resize of the last axis: output ``j`` reads ``floor(j*L/target_len)``."""
    L = x.shape[-1]
    if target_len < L:
        raise DimensionError(f"upsample_nearest: target length {target_len} < input length {L}")
    src = (np.arange(target_len) * L) // target_len

    def bw(g):
        out = np.zeros(g.shape[:-1] + (L,), dtype=DTYPE)
        np.add.at(out, (..., src), g)
        return (out,)

    return _result(x.data[..., src], (x,), bw, "upsample_nearest")


# --------------------------------------------------------------------------
# linear algebra and signal ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes, if any, must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _result(ad @ bd, (a, b), bw, "matmul")


def _pad_pair(pad: int | tuple[int, int]) -> tuple[int, int]:
    if isinstance(pad, int):
        left = right = pad
    else:
        left, right = pad
    if left < 0 or right < 0:
        raise DimensionError(f"conv1d: padding must be nonnegative, got {pad}")
    return int(left), int(right)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: int | tuple[int, int] = 0) -> Tensor:
    """Cross-correlation of ``x[..., Cin, L]`` with ``w[Cout, Cin, K]``, zero padding.

    ``pad`` is either symmetric or a ``(left, right)`` pair.  The output length
    is ``floor((L + left + right - K) / stride) + 1``.
    """
    if stride < 1:
        raise DimensionError(f"conv1d: stride must be positive, got {stride}")
    if x.ndim not in (2, 3) or w.ndim != 3 or x.shape[-2] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv1d: bias {b.shape} does not match {w.shape[0]} output channels")
    left, right = _pad_pair(pad)
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    B, Cin, L = xd.shape
    Cout, _, K = w.shape
    Lp = L + left + right
    if K > Lp:
        raise DimensionError(f"conv1d: kernel {K} longer than padded input {Lp}")
    Lout = (Lp - K) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if left or right else xd
    # cols[b, j, c, k] = xp[b, c, j*stride + k]
    cols = sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :Lout]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(B, Lout, Cin * K)
    wmat = w.data.reshape(Cout, Cin * K)
    out = cols @ wmat.T  # [B, Lout, Cout]
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    if unbatched:
        out = out[0]

    def bw(g):
        gb = g[None] if unbatched else g
        gt = gb.transpose(0, 2, 1)  # [B, Lout, Cout]
        gw = np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(Cout, Cin, K)
        gcols = (gt @ wmat).reshape(B, Lout, Cin, K)
        gxp = np.zeros((B, Cin, Lp), dtype=DTYPE)
        span = stride * (Lout - 1) + 1
        for k in range(K):
            gxp[:, :, k:k + span:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, left:left + L]
        if unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(gb.sum(axis=(0, 2)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "conv1d")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    s = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def bw(g):
        gs = g * s
        gs -= s * gs.sum(axis=axis, keepdims=True)
        return (gs,)

    return _result(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each slice along the last axis, then apply ``gamma``/``beta``."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs last axis {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _result(out, (x, gamma, beta), bw, "layer_norm")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[i, index[i]]`` for a 2-D ``x``; returns shape ``[R]``."""
    if x.ndim != 2 or len(index) != x.shape[0]:
        raise DimensionError(f"pick: index of length {len(index)} vs input {x.shape}")
    rows = np.arange(x.shape[0])
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[rows, index] = g
        return (out,)

    return _result(x.data[rows, index].copy(), (x,), bw, "pick")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q @ k.T / sqrt(d)) @ v`` over the last two axes, one fused op.

    Works head by head so each ``T x T`` weight matrix stays cache-sized.  The
    exponentials are kept unnormalised and the row sums are applied on the
    ``T x d`` side.  The softmax backward uses
    ``sum_j P_ij * (g_i . v_j) == g_i . out_i``, which saves a pass.
    """
    if q.shape != k.shape or q.shape != v.shape or q.ndim < 2:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    *lead, T, d = q.shape
    qf = q.data.reshape(-1, T, d)
    kf = k.data.reshape(-1, T, d)
    vf = v.data.reshape(-1, T, d)
    qs = qf * (1.0 / np.sqrt(d))
    out = np.empty_like(qf)
    expo = []
    inv_sum = np.empty(qf.shape[:2])
    for i in range(qf.shape[0]):
        e = qs[i] @ kf[i].T
        np.subtract(e, e.max(axis=1, keepdims=True), out=e)
        np.exp(e, out=e)
        inv_sum[i] = 1.0 / e.sum(axis=1)
        np.matmul(e, vf[i], out=out[i])
        out[i] *= inv_sum[i][:, None]
        expo.append(e)

    def bw(g):
        gf = g.reshape(-1, T, d)
        row = (gf * out).sum(axis=-1)
        gn = gf * inv_sum[:, :, None]
        gq = np.empty_like(qf)
        gk = np.empty_like(kf)
        gv = np.empty_like(vf)
        for i, e in enumerate(expo):
            np.matmul(e.T, gn[i], out=gv[i])
            gs = gn[i] @ vf[i].T
            gs -= (row[i] * inv_sum[i])[:, None]
            gs *= e
            np.matmul(gs, kf[i], out=gq[i])
            np.matmul(gs.T, qs[i], out=gk[i])
        gq *= 1.0 / np.sqrt(d)
        shape = q.shape
        return gq.reshape(shape), gk.reshape(shape), gv.reshape(shape)

    return _result(out.reshape(q.shape), (q, k, v), bw, "attention")
