"""Dense float64 tensors with a reverse-mode tape.

Every op computes its forward value eagerly with numpy and, when a
:class:`Tape` is active and at least one input requires a gradient, appends a
:class:`TapeNode` holding the op id, its inputs and whatever the backward rule
needs.  Backward rules live in :data:`VJP_RULES`, keyed by op id, so a rule can
be swapped out (the gradient-check harness tests rely on that).

Shapes are limited to rank <= 3; rank 3 only appears as the head axis inside
multi-head attention.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 3


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # sugar for the common elementwise ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict = field(default_factory=dict)


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records ops executed inside a ``with`` block.

    One tape per example; tapes are thread-local and never shared.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def gradient(self, target: Tensor, sources: Sequence[Tensor],
                 seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Vector-Jacobian product of ``target`` w.r.t. each source.

        ``seed`` defaults to ones (so a scalar target yields its gradient).
        Sources the target does not depend on get zeros.
        """
        grads: dict[int, np.ndarray] = {
            id(target): np.ones_like(target.data) if seed is None
            else np.asarray(seed, dtype=np.float64)
        }
        keep = {id(s) for s in sources}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            in_grads = VJP_RULES[node.op](g, node)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                prev = grads.get(k)
                grads[k] = gi if prev is None else prev + gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]

    def first_nonfinite(self) -> TapeNode | None:
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node
        return None


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], **saved) -> Tensor:
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.nodes.append(TapeNode(op, inputs, result, saved))
    return result


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- forward ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; rank-3 operands are batched over the leading axis."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] \
            or (a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record("transpose", np.swapaxes(x.data, -1, -2), (x,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _record("add", a.data + b.data, (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _record("sub", a.data - b.data, (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return _record("mul", a.data * b.data, (a, b))


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", x.data * c, (x,), c=c)


def relu(x: Tensor) -> Tensor:
    return _record("relu", np.maximum(x.data, 0.0), (x,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _record("sigmoid", out, (x,), y=out)


def broadcast_row(x: Tensor, m: int) -> Tensor:
    """Repeat a 1 x d row over ``m`` rows."""
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise DimensionError(f"broadcast_row: expected 1 x d row, got {x.shape}")
    return _record("broadcast_row", np.repeat(x.data, m, axis=0), (x,))


def broadcast_col(x: Tensor, n: int) -> Tensor:
    """Repeat an m x 1 column over ``n`` columns."""
    if x.data.ndim != 2 or x.shape[1] != 1:
        raise DimensionError(f"broadcast_col: expected m x 1 column, got {x.shape}")
    return _record("broadcast_col", np.repeat(x.data, n, axis=1), (x,))


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """``x + row`` with the 1 x d row broadcast over the rows of ``x``."""
    return add(x, broadcast_row(row, x.shape[0]))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, broadcast_row."""
    fn = {"add": add, "sub": sub, "mul": mul, "relu": relu,
          "broadcast_row": broadcast_row}.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fn(*args)


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading dims of {a.shape} and {b.shape} differ")
    return _record("concat", np.concatenate([a.data, b.data], axis=-1), (a, b),
                   split=a.shape[-1])


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max.

    ``mask`` is an additive constant (e.g. -1e9 at blocked positions) that
    takes no gradient.
    """
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax", y, (x,), y=y)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer norm of an l x d tensor with 1 x d gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    return _record("layer_norm", out, (x, gamma, beta), xhat=xhat, inv=inv)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    return _record("embedding", table.data[idx], (table,), idx=idx)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """l x d -> h x l x (d/h)."""
    l, d = x.shape
    out = x.data.reshape(l, n_heads, d // n_heads).transpose(1, 0, 2)
    return _record("split_heads", out, (x,))


def merge_heads(x: Tensor) -> Tensor:
    """h x l x dh -> l x (h*dh)."""
    h, l, dh = x.shape
    return _record("merge_heads", x.data.transpose(1, 0, 2).reshape(l, h * dh), (x,))


def sum_all(x: Tensor) -> Tensor:
    return _record("sum", np.asarray(x.data.sum()), (x,))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum of ``x * weights`` with a constant weight array."""
    w = np.asarray(weights, dtype=np.float64)
    return _record("weighted_sum", np.asarray((x.data * w).sum()), (x,), w=w)


def cross_entropy(logits: Tensor, targets: Sequence[int],
                  weights: np.ndarray | None = None) -> Tensor:
    """Mean categorical cross-entropy of rows of ``logits`` (n x C).

    ``weights`` (length n, 0/1) excludes rows, e.g. padded targets; the mean
    is over the included rows.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    count = w.sum()
    if count <= 0:
        raise ValueError("cross_entropy: no rows to average")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(n), tgt]
    loss = float((nll * w).sum() / count)
    return _record("cross_entropy", np.asarray(loss), (logits,),
                   p=np.exp(logp), tgt=tgt, w=w / count)


# ------------------------------------------------------------- backward rules

def _vjp_matmul(g, node):
    a, b = node.inputs
    ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.data.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
    if ga is not None and a.data.ndim == 2 and ga.ndim == 3:
        ga = ga.sum(axis=0)
    return ga, gb


def _vjp_layer_norm(g, node):
    x, gamma, _ = node.inputs
    xhat, inv = node.saved["xhat"], node.saved["inv"]
    gxhat = g * gamma.data
    d = xhat.shape[-1]
    gx = inv / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
    ggamma = (g * xhat).sum(axis=0, keepdims=True)
    gbeta = g.sum(axis=0, keepdims=True)
    return gx, ggamma, gbeta


def _vjp_softmax(g, node):
    y = node.saved["y"]
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _vjp_embedding(g, node):
    table = node.inputs[0]
    out = np.zeros_like(table.data)
    np.add.at(out, node.saved["idx"], g)
    return (out,)


def _vjp_cross_entropy(g, node):
    p, tgt, w = node.saved["p"], node.saved["tgt"], node.saved["w"]
    d = p.copy()
    d[np.arange(len(tgt)), tgt] -= 1.0
    return (g * d * w[:, None],)


def _vjp_concat(g, node):
    k = node.saved["split"]
    return g[..., :k], g[..., k:]


def _vjp_split_heads(g, node):
    h, l, dh = g.shape
    return (g.transpose(1, 0, 2).reshape(l, h * dh),)


def _vjp_merge_heads(g, node):
    h, l, dh = node.inputs[0].shape
    return (g.reshape(l, h, dh).transpose(1, 0, 2),)


VJP_RULES: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "transpose": lambda g, n: (np.swapaxes(g, -1, -2),),
    "add": lambda g, n: (g, g),
    "sub": lambda g, n: (g, -g),
    "mul": lambda g, n: (g * n.inputs[1].data, g * n.inputs[0].data),
    "scale": lambda g, n: (g * n.saved["c"],),
    "relu": lambda g, n: (g * (n.inputs[0].data > 0),),
    "sigmoid": lambda g, n: (g * n.saved["y"] * (1.0 - n.saved["y"]),),
    "broadcast_row": lambda g, n: (g.sum(axis=0, keepdims=True),),
    "broadcast_col": lambda g, n: (g.sum(axis=1, keepdims=True),),
    "concat": _vjp_concat,
    "softmax": _vjp_softmax,
    "layer_norm": _vjp_layer_norm,
    "embedding": _vjp_embedding,
    "split_heads": _vjp_split_heads,
    "merge_heads": _vjp_merge_heads,
    "sum": lambda g, n: (np.full_like(n.inputs[0].data, g),),
    "weighted_sum": lambda g, n: (g * n.saved["w"],),
    "cross_entropy": _vjp_cross_entropy,
}
