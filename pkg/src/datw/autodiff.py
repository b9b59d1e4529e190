"""Dense tensors with a small reverse-mode autodiff tape.

Only the primitives needed by the attention network and its losses are
provided. Values are plain ``numpy`` arrays; a :class:`Node` wraps one and
remembers how it was produced so :func:`backward` can push gradients back
through the graph.

Leaf gradients accumulate across graphs (call :func:`zero_grad` between
optimizer steps). A graph can be back-propagated exactly once; a second
``backward`` on the same root raises ``RuntimeError``.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Node",
    "tensor",
    "parameter",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "zero_grad",
    "BatchNormState",
    "conv2d",
    "batch_norm",
    "relu",
    "maxpool2x2",
    "upsample2x2",
    "row_softmax",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose2d",
    "concat_channels",
    "frobenius_sq",
    "sum_all",
    "mean_all",
    "pad2d",
    "crop2d",
    "reshape",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node:
    """A value in the computation graph.

    ``grad`` is ``None`` until a backward pass reaches the node.
    """

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "name",
                 "_backward", "_consumed")

    def __init__(self, value: np.ndarray, parents: tuple["Node", ...] = (),
                 op: str = "leaf", requires_grad: bool = False,
                 backward_fn: Callable | None = None, name: str | None = None):
        self.value = value
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._backward = backward_fn
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _check_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf values")


def tensor(data, requires_grad: bool = False, dtype=np.float64,
           name: str | None = None) -> Node:
    """Build a leaf node from external data, rejecting non-finite values."""
    arr = np.array(data, dtype=dtype)
    if arr.ndim > 4:
        raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of 4")
    _check_finite(arr)
    return Node(arr, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None, dtype=np.float64) -> Node:
    return tensor(data, requires_grad=True, dtype=dtype, name=name)


def constant(x, dtype=None) -> Node:
    """Wrap ``x`` as a non-differentiable node (no copy for arrays)."""
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Node(arr)


def _make(value: np.ndarray, parents: tuple[Node, ...], op: str,
          backward_fn: Callable) -> Node:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Node(value, op=op)
    return Node(value, parents=parents, op=op, requires_grad=True,
                backward_fn=backward_fn)


def _as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Node(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node, grad: np.ndarray | None = None) -> None:
    """Propagate gradients from a scalar ``root`` to every reachable node."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild it")
    if not root.requires_grad:
        root._consumed = True
        return
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.value) if grad is None else np.asarray(grad)
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.parents:
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        else:
            node.grad = g if node.grad is None else node.grad + g
    root._consumed = True


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# elementwise and linear algebra
# --------------------------------------------------------------------------

def add(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), "add", _bw)


def sub(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), "sub", _bw)


def mul(a, b) -> Node:
    """Elementwise product with broadcasting."""
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)

    def _bw(g):
        return (_unbroadcast(g * b.value, a.shape),
                _unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), "mul", _bw)


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return _make(x.value * x.value.dtype.type(c), (x,), "scale",
                 lambda g: (g * c,))


def matmul(a, b) -> Node:
    """Batched matrix product over the last two axes."""
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.value @ b.value, (a, b), "matmul", _bw)


def transpose2d(x: Node) -> Node:
    """Swap the last two axes."""
    if x.value.ndim < 2:
        raise ValueError(f"transpose2d needs rank >= 2, got {x.shape}")
    return _make(np.swapaxes(x.value, -1, -2), (x,), "transpose2d",
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Node, shape: Sequence[int]) -> Node:
    old = x.shape
    return _make(x.value.reshape(shape), (x,), "reshape",
                 lambda g: (g.reshape(old),))


def concat_channels(nodes: Sequence[Node]) -> Node:
    """Concatenate rank-4 nodes along the channel axis."""
    nodes = [_as_node(n) for n in nodes]
    base = nodes[0].shape
    for n in nodes[1:]:
        if n.value.ndim != 4 or n.shape[0] != base[0] or n.shape[2:] != base[2:]:
            raise ValueError(f"concat_channels shape mismatch: {base} vs {n.shape}")
    splits = np.cumsum([n.shape[1] for n in nodes])[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate([n.value for n in nodes], axis=1),
                 tuple(nodes), "concat_channels", _bw)


def frobenius_sq(x: Node, keep_batch: bool = False) -> Node:
    """Sum of squares; with ``keep_batch`` one value per leading index."""
    if keep_batch:
        axes = tuple(range(1, x.value.ndim))
        value = np.sum(x.value * x.value, axis=axes)

        def _bw(g):
            return (2.0 * x.value * g.reshape(g.shape + (1,) * len(axes)),)
    else:
        value = np.sum(x.value * x.value)

        def _bw(g):
            return (2.0 * g * x.value,)

    return _make(np.asarray(value), (x,), "frobenius_sq", _bw)


def sum_all(x: Node) -> Node:
    return _make(np.asarray(x.value.sum()), (x,), "sum",
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Node) -> Node:
    return scale(sum_all(x), 1.0 / x.value.size)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0).astype(x.dtype, copy=False), (x,),
                 "relu", lambda g: (g * mask,))


def row_softmax(x: Node) -> Node:
    """Softmax along the last axis with max subtraction."""
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, (x,), "row_softmax", _bw)


# --------------------------------------------------------------------------
# spatial ops on B x C x H x W
# --------------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Node, weight: Node, bias: Node | None = None, stride: int = 1,
           padding=0) -> Node:
    """Cross-correlation of ``x`` (B,Cin,H,W) with ``weight`` (Cout,Cin,kh,kw).

    ``padding`` is an int or an ``(ph, pw)`` pair of symmetric zero padding.
    """
    x = _as_node(x)
    weight = _as_node(weight)
    if x.value.ndim != 4 or weight.value.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got "
                         f"{x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, "
                         f"weight {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {weight.shape}")
    if bias is not None:
        bias = _as_node(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d bias shape {bias.shape} does not match "
                             f"weight {weight.shape}")
    ph, pw = _pair(padding)
    bsz, _, h, w = x.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    if (hp - kh) % stride or (wp - kw) % stride or hp < kh or wp < kw:
        raise ValueError(f"conv2d output extent is not integral for input "
                         f"{x.shape}, weight {weight.shape}, stride {stride}, "
                         f"padding {padding}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.value
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        windows = windows[:, :, ::stride, ::stride]
    # windows: B, Cin, Ho, Wo, kh, kw
    out = np.tensordot(windows, weight.value, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.value[None, :, None, None]

    def _bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            gt = g.transpose(0, 2, 3, 1)  # B, Ho, Wo, Cout
            for di in range(kh):
                for dj in range(kw):
                    contrib = gt @ weight.value[:, :, di, dj]  # B, Ho, Wo, Cin
                    gxp[:, :, di:di + stride * ho:stride,
                        dj:dj + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _make(out, parents, "conv2d", lambda g: _bw(g)[:2])
    return _make(out, parents, "conv2d", _bw)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    tracked_batches: int = field(default=0)

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5,
               dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype),
                   momentum, eps)


def batch_norm(x: Node, gamma: Node, beta: Node, state: BatchNormState,
               training: bool) -> Node:
    """Per-channel normalization of a B x C x H x W node.

    In training mode the batch statistics are used and ``state`` is updated
    in place with the configured momentum (unbiased variance for the running
    estimate). In eval mode the running statistics are used and nothing is
    mutated.
    """
    x = _as_node(x)
    if x.value.ndim != 4:
        raise ValueError(f"batch_norm expects rank-4 input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm parameter shapes {gamma.shape}/{beta.shape} "
                         f"do not match {c} channels")
    eps = state.eps
    g4 = gamma.value[None, :, None, None]
    b4 = beta.value[None, :, None, None]
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.value - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = (xhat * g4 + b4).astype(x.dtype, copy=False)

        def _bw_eval(g):
            gx = g * (g4 * inv[None, :, None, None])
            return gx, np.sum(g * xhat, axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _make(out, (x, gamma, beta), "batch_norm", _bw_eval)

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ValueError("batch_norm in train mode needs at least two values per "
                         "channel (variance undefined)")
    mean = x.value.mean(axis=(0, 2, 3))
    centered = x.value - mean[None, :, None, None]
    var = np.mean(centered * centered, axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None, None]
    out = xhat * g4 + b4

    mom = state.momentum
    state.running_mean = (1 - mom) * state.running_mean + mom * mean
    state.running_var = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
    state.tracked_batches += 1

    def _bw(g):
        ggamma = np.sum(g * xhat, axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * g4
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * np.sum(gxhat * xhat, axis=(0, 2, 3), keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), "batch_norm", _bw)


def maxpool2x2(x: Node) -> Node:
    """2x2 max pooling; gradient goes to the first maximal entry of each window."""
    if x.value.ndim != 4:
        raise ValueError(f"maxpool2x2 expects rank-4 input, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    blocks = x.value.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gb = np.zeros((b, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(b, c, h, w),)

    return _make(out, (x,), "maxpool2x2", _bw)


def upsample2x2(x: Node) -> Node:
    """Nearest-neighbour upsampling doubling both spatial extents."""
    if x.value.ndim != 4:
        raise ValueError(f"upsample2x2 expects rank-4 input, got {x.shape}")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def _bw(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), "upsample2x2", _bw)


def pad2d(x: Node, pad_h: int, pad_w: int) -> Node:
    """Zero-pad the bottom and right edges."""
    if pad_h == 0 and pad_w == 0:
        return x
    h, w = x.shape[-2:]
    widths = [(0, 0)] * (x.value.ndim - 2) + [(0, pad_h), (0, pad_w)]
    return _make(np.pad(x.value, widths), (x,), "pad2d",
                 lambda g: (g[..., :h, :w],))


def crop2d(x: Node, h: int, w: int) -> Node:
    """Keep the top-left ``h`` x ``w`` block."""
    if (h, w) == x.shape[-2:]:
        return x
    full = x.shape

    def _bw(g):
        out = np.zeros(full, dtype=g.dtype)
        out[..., :h, :w] = g
        return (out,)

    return _make(np.ascontiguousarray(x.value[..., :h, :w]), (x,), "crop2d", _bw)
