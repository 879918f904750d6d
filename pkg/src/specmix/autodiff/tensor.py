"""Dense float64 tensors recorded on a tape for reverse-mode differentiation.

Every primitive's backward rule is written with the same tensor primitives,
so a backward pass run with ``create_graph=True`` is itself recorded on the
tape and can be differentiated again. That is what the gradient penalty of
the critic needs.

Ops only record while a :class:`Tape` is active::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = (w * w).sum()
    (dw,) = tape.gradient(y, [w])
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from specmix.errors import ContractError, NonFiniteError, ShapeError, UnsupportedOpError

_node_ids = itertools.count()
# stack of entered tapes; ``None`` marks a no_record barrier
_active_tapes: list["Tape | None"] = []


@contextlib.contextmanager
def no_record():
    """Stop recording on the tapes active so far.

    A tape entered inside the block still records.
    """
    _active_tapes.append(None)
    try:
        yield
    finally:
        _active_tapes.pop()


def _recording_tapes() -> list["Tape"]:
    out = []
    for tape in reversed(_active_tapes):
        if tape is None:
            break
        if tape not in out:
            out.append(tape)
    return out


class Node:
    """One op record on a tape."""

    __slots__ = ("op", "inputs", "output", "backward", "second_order")

    def __init__(self, op, inputs, output, backward, second_order):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.second_order = second_order

    def __repr__(self):
        ids = [t.node_id for t in self.inputs]
        return f"Node({self.op}, inputs={ids}, out={self.output.node_id})"


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return tabs(self)


def _not_scalar():
    raise ContractError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data, inputs: tuple, backward: Callable, second_order: bool = True) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor(data)
    tapes = _recording_tapes() if _active_tapes else ()
    if tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, out, backward, second_order)
        out.node = node
        for tape in tapes:
            tape.nodes.append(node)
    return out


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------
class Tape:
    """Append-only record of ops, in creation (hence topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        # remove this entry only; re-entered tapes record once per node
        for i in range(len(_active_tapes) - 1, -1, -1):
            if _active_tapes[i] is self:
                del _active_tapes[i]
                break
        return False

    def gradient(
        self,
        output: Tensor,
        sources: Sequence[Tensor],
        create_graph: bool = False,
        output_grad: Tensor | None = None,
    ) -> list[Tensor]:
        """Gradients of ``output`` w.r.t. each of ``sources``.

        With ``create_graph`` the backward ops are recorded on this tape, so
        the returned gradients can themselves be differentiated.
        Sources the output does not depend on get zeros.
        """
        if output_grad is None:
            if output.size != 1:
                raise ContractError(
                    f"backward needs a scalar output, got shape {output.shape}"
                )
            output_grad = Tensor(np.ones_like(output.data))
        sources = list(sources)
        relevant = {s.node_id for s in sources}
        nodes = list(self.nodes)
        if output.node_id not in relevant and not any(n.output is output for n in nodes):
            raise ContractError("output was not recorded on this tape")
        for node in nodes:
            if any(t.node_id in relevant for t in node.inputs):
                relevant.add(node.output.node_id)

        grads: dict[int, Tensor] = {}
        if output.node_id in relevant:
            grads[output.node_id] = output_grad
        keep = {s.node_id for s in sources}

        ctx = recording(self) if create_graph else no_record()
        with ctx:
            for node in reversed(nodes):
                out_id = node.output.node_id
                g = grads.get(out_id) if out_id in keep else grads.pop(out_id, None)
                if g is None:
                    continue
                if create_graph and not node.second_order:
                    raise UnsupportedOpError([node.op])
                needs = tuple(t.node_id in relevant for t in node.inputs)
                in_grads = node.backward(g, needs)
                for inp, need, ig in zip(node.inputs, needs, in_grads):
                    if not need or ig is None:
                        continue
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = ig if prev is None else prev + ig

        result = []
        for s in sources:
            g = grads.get(s.node_id)
            result.append(g if g is not None else Tensor(np.zeros_like(s.data)))
        return result

    def second_order_gaps(self, output: Tensor) -> list[str]:
        """Ops on the path to ``output`` that have no second-order rule."""
        live = {output.node_id}
        missing = []
        for node in reversed(self.nodes):
            if node.output.node_id in live:
                if not node.second_order:
                    missing.append(node.op)
                live.update(t.node_id for t in node.inputs)
        return missing


@contextlib.contextmanager
def recording(tape: Tape):
    """Record on ``tape`` inside the block, even under :func:`no_record`."""
    with tape:
        yield tape


def backward(tape: Tape, output: Tensor) -> dict[int, Tensor]:
    """Gradient map (node id -> gradient) for every trainable leaf on ``tape``."""
    leaves = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.node is None:
                leaves[t.node_id] = t
    grads = tape.gradient(output, list(leaves.values()))
    return {nid: g for nid, g in zip(leaves, grads)}


def grad(output: Tensor, sources: Sequence[Tensor], tape: Tape) -> list[Tensor]:
    return tape.gradient(output, sources)


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------
def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    return g if g.shape == tuple(shape) else sum_to(g, shape)


def sum_to(x: Tensor, shape) -> Tensor:
    """Sum ``x`` down to a shape it was broadcast from."""
    shape = tuple(shape)
    x = as_tensor(x)
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True).reshape(shape) if axes else x.data.reshape(shape)
    in_shape = x.shape

    def bw(g, needs):
        return (broadcast_to(g, in_shape),)

    return _make("sum_to", data, (x,), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    x = as_tensor(x)
    in_shape = x.shape

    def bw(g, needs):
        return (sum_to(g, in_shape),)

    return _make("broadcast_to", np.broadcast_to(x.data, shape), (x,), bw)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NonFiniteError("div")

    def bw(g, needs):
        ga = _unbroadcast(g / b, a.shape) if needs[0] else None
        gb = _unbroadcast(-(g * a) / (b * b), b.shape) if needs[1] else None
        return ga, gb

    return _make("div", a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g, needs: (-g,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data**p

    def bw(g, needs):
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * power(a, p - 1.0) * p,)

    return _make("pow", data, (a,), bw)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def safe_sqrt(a) -> Tensor:
    """Square root whose derivative is taken as 0 where the input is 0."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    zero = data == 0
    pad, live = Tensor(zero.astype(np.float64)), Tensor((~zero).astype(np.float64))
    out = None

    def bw(g, needs):
        return (g * 0.5 / (out + pad) * live,)

    out = _make("sqrt", data, (a,), bw)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = None

    def bw(g, needs):
        return (g * out,)

    out = _make("exp", data, (a,), bw)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make("log", data, (a,), lambda g, needs: (g / a,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw(g, needs):
        return (g * (1.0 - out * out),)

    out = _make("tanh", np.tanh(a.data), (a,), bw)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = None

    def bw(g, needs):
        return (g * out * (1.0 - out),)

    out = _make("sigmoid", data, (a,), bw)
    return out


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))
    return _make("abs", np.abs(a.data), (a,), lambda g, needs: (g * sign,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; clamped entries pass no gradient."""
    a = as_tensor(a)
    mask = Tensor(((a.data > lo) & (a.data < hi)).astype(np.float64))
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g, needs: (g * mask,))


def arccos(a) -> Tensor:
    """Elementwise arccos. First-order only."""
    a = as_tensor(a)
    # derivative is unbounded at +-1; cap it at 1e6
    slope = -1.0 / np.sqrt(np.maximum(1.0 - a.data**2, 1e-12))

    def bw(g, needs):
        return (Tensor(g.data * slope),)

    return _make("arccos", np.arccos(np.clip(a.data, -1.0, 1.0)), (a,), bw, second_order=False)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------
def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g, needs):
        ga = _unbroadcast(matmul(g, _swap_last(b)), a.shape) if needs[0] else None
        gb = _unbroadcast(matmul(_swap_last(a), g), b.shape) if needs[1] else None
        return ga, gb

    return _make("matmul", np.matmul(a.data, b.data), (a, b), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g, needs: (transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, in_shape),))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def bw(g, needs):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, in_shape),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    in_shape = a.shape
    return _make(
        "getitem", a.data[index], (a,), lambda g, needs: (_place(g, index, in_shape),)
    )


def _place(g: Tensor, index, shape) -> Tensor:
    """Adjoint of ``getitem``: zeros of ``shape`` with ``g`` written at ``index``."""
    data = np.zeros(shape)
    data[index] = g.data
    return _make("place", data, (g,), lambda gg, needs: (getitem(gg, index),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx = [slice(None)] * ndim
            idx[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# Sliding-window gather for 1-D convolution
# ---------------------------------------------------------------------------
def _window_index(length_out, k, stride):
    return stride * np.arange(length_out)[:, None] + np.arange(k)[None, :]


def im2col(x, k: int, stride: int, pad_left: int, length_out: int) -> Tensor:
    """Gather zero-padded windows: ``B x D x C -> B x L x k x C``."""
    x = as_tensor(x)
    b, d, c = x.shape
    span = (length_out - 1) * stride + k
    pad_right = max(span - d - pad_left, 0)
    xp = np.pad(x.data, ((0, 0), (pad_left, pad_right), (0, 0)))
    cols = xp[:, _window_index(length_out, k, stride), :]

    def bw(g, needs):
        return (col2im(g, d, stride, pad_left),)

    return _make("im2col", cols, (x,), bw)


def col2im(cols, d: int, stride: int, pad_left: int) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add windows back to ``B x D x C``."""
    cols = as_tensor(cols)
    b, length_out, k, c = cols.shape
    span = (length_out - 1) * stride + k
    padded = max(span, d + pad_left)
    acc = np.zeros((b, padded, c))
    starts = stride * np.arange(length_out)
    for j in range(k):
        # positions within one tap are distinct, so fancy += is safe
        acc[:, starts + j, :] += cols.data[:, :, j, :]
    data = acc[:, pad_left : pad_left + d, :]

    def bw(g, needs):
        return (im2col(g, k, stride, pad_left, length_out),)

    return _make("col2im", data, (cols,), bw)
