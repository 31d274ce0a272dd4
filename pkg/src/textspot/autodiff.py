"""Reverse-mode automatic differentiation over dense float64 tensors.

Design rules kept deliberately strict so every backward rule stays
auditable:

- everything is double precision, row-major;
- no broadcasting except multiplication by a Python scalar (``scale``)
  and the explicitly named structured ops (``add_rowvec``, conv bias);
- an operation participates in backpropagation only while a ``Tape`` is
  active; without one, ops are plain numpy forward computations.

Typical use::

    with Tape() as tape:
        y = matmul(w, x)
        loss = sum_all(mul(y, y))
    tape.backward(loss)
    # w.grad now holds dloss/dw
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .exceptions import GraphError, ShapeMismatchError

DTYPE = np.float64


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is either
    None (never touched by backward) or an ndarray of the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


def uniform_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                 name: str | None = None) -> Tensor:
    """Trainable tensor drawn uniformly from +-sqrt(6/(fan_in+fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True, name=name)


class Node:
    """One recorded operation: inputs, output, and its local rules.

    ``forward_fn`` recomputes the output array from the inputs' current
    data (used by ``Tape.replay``). ``backward_fn(grad_out)`` returns one
    gradient array (or None) per input, in input order.
    """

    __slots__ = ("op", "inputs", "output", "forward_fn", "backward_fn", "needs")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 forward_fn: Callable[[], np.ndarray],
                 backward_fn: Callable[[np.ndarray], tuple],
                 needs: tuple[bool, ...]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn
        self.needs = needs

    def recompute(self) -> None:
        self.output.data = np.ascontiguousarray(self.forward_fn(), dtype=DTYPE)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations (a computation record).

    Nodes are appended in execution order, which is automatically a
    topological order. Entering the context makes the tape active so
    that ops record themselves onto it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def _add(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def replay(self) -> None:
        """Re-run every recorded forward computation in order."""
        for node in self.nodes:
            node.recompute()

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Accumulate dloss/dt into ``t.grad`` for every tensor that
        requires a gradient and appears on this tape.

        ``loss`` must be a scalar produced by this tape. Tensors in
        ``params`` that never influenced the loss receive zero gradients
        rather than staying at None.
        """
        if loss.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise GraphError("loss tensor was not produced by this record")

        flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            grad_out = flowing.get(id(node.output))
            if grad_out is None or not any(node.needs):
                continue
            grads_in = node.backward_fn(grad_out)
            for tensor, needed, g in zip(node.inputs, node.needs, grads_in):
                if not needed or g is None:
                    continue
                g = np.asarray(g, dtype=DTYPE)
                key = id(tensor)
                if key in flowing:
                    flowing[key] = flowing[key] + g
                else:
                    flowing[key] = g

        seen: set[int] = set()
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in seen:
                    seen.add(id(tensor))
                    g = flowing.get(id(tensor))
                    if g is None:
                        g = np.zeros_like(tensor.data)
                    tensor.grad = g if tensor.grad is None else tensor.grad + g
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
              forward_fn: Callable[[], np.ndarray],
              backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap a computed result in a Tensor and record it on the active tape.

    Shared by every op here and by the fused loss ops in losses.py.
    """
    tape = active_tape()
    if tape is None:
        needs = tuple(t.requires_grad for t in inputs)
        return Tensor(out_data, requires_grad=any(needs))
    needs = tuple(t.requires_grad or id(t) in tape._produced for t in inputs)
    out = Tensor(out_data, requires_grad=any(needs))
    tape._add(Node(op, inputs, out, forward_fn, backward_fn, needs))
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Accepts [m,k]x[k,n], [k]x[k,n] and [m,k]x[k]."""
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeMismatchError(
            f"matmul expects 1-D or 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def forward():
        return a.data @ b.data

    def backward(g):
        da = db = None
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            da = g @ bd.T
            db = ad.T @ g
        elif ad.ndim == 1 and bd.ndim == 2:          # row vector times matrix
            da = bd @ g
            db = np.outer(ad, g)
        else:                                        # matrix times column vector
            da = np.outer(g, bd)
            db = ad.T @ g
        return da, db

    return record_op("matmul", (a, b), forward(), forward, backward)


def _conv_geometry(in_h: int, in_w: int, kh: int, kw: int, stride: int,
                   padding: str) -> tuple[int, int, int, int, int, int]:
    """Output dims and per-side pads for 'same'/'valid' cross-correlation."""
    if padding == "valid":
        pt = pb = pl = pr = 0
        out_h = (in_h - kh) // stride + 1 if in_h >= kh else 0
        out_w = (in_w - kw) // stride + 1 if in_w >= kw else 0
    elif padding == "same":
        out_h = -(-in_h // stride)
        out_w = -(-in_w // stride)
        pad_h = max((out_h - 1) * stride + kh - in_h, 0)
        pad_w = max((out_w - 1) * stride + kw - in_w, 0)
        pt, pb = pad_h // 2, pad_h - pad_h // 2
        pl, pr = pad_w // 2, pad_w - pad_w // 2
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kh > in_h + (pt + pb) or kw > in_w + (pl + pr) or out_h < 1 or out_w < 1:
        raise ShapeMismatchError(
            f"kernel {kh}x{kw} exceeds padded input "
            f"{in_h + pt + pb}x{in_w + pl + pr}")
    return out_h, out_w, pt, pb, pl, pr


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "valid",
           bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of [h,w,c_in] with [kh,kw,c_in,c_out].

    Asymmetric kernels (1xn, nx1) are supported. Implemented as im2col
    followed by one matrix product; the patch matrix is rebuilt on each
    forward so the backward closure always matches the latest data.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects [h,w,c_in] and [kh,kw,c_in,c_out], "
            f"got {x.shape} and {kernel.shape}")
    in_h, in_w, c_in = x.shape
    kh, kw, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatchError(
            f"conv2d bias shape {bias.shape} does not match c_out={c_out}")
    out_h, out_w, pt, pb, pl, pr = _conv_geometry(in_h, in_w, kh, kw, stride, padding)

    state: dict[str, np.ndarray] = {}

    def forward():
        xp = np.pad(x.data, ((pt, pb), (pl, pr), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
        win = win[::stride, ::stride]                 # (out_h, out_w, c_in, kh, kw)
        patches = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2))
        patches = patches.reshape(out_h * out_w, kh * kw * c_in)
        state["patches"] = patches
        out = patches @ kernel.data.reshape(kh * kw * c_in, c_out)
        if bias is not None:
            out = out + bias.data
        return out.reshape(out_h, out_w, c_out)

    def backward(g):
        g2 = g.reshape(out_h * out_w, c_out)
        dk = dx = db = None
        if bias is not None:
            db = g2.sum(axis=0)
        dk = (state["patches"].T @ g2).reshape(kernel.shape)
        dpatch = (g2 @ kernel.data.reshape(kh * kw * c_in, c_out).T)
        dpatch = dpatch.reshape(out_h, out_w, kh, kw, c_in)
        dxp = np.zeros((in_h + pt + pb, in_w + pl + pr, c_in), dtype=DTYPE)
        for u in range(kh):
            for v in range(kw):
                dxp[u:u + stride * out_h:stride,
                    v:v + stride * out_w:stride] += dpatch[:, :, u, v, :]
        dx = dxp[pt:pt + in_h, pl:pl + in_w]
        if bias is not None:
            return dx, dk, db
        return dx, dk

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record_op("conv2d", inputs, forward(), forward, backward)


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------

def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op} requires equal shapes: {a.shape} vs {b.shape}")


def tanh(x: Tensor) -> Tensor:
    def forward():
        return np.tanh(x.data)
    out_data = forward()

    def backward(g):
        return ((1.0 - np.tanh(x.data) ** 2) * g,)

    return record_op("tanh", (x,), out_data, forward, backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # two-branch form avoids exp overflow for large negative inputs
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    def forward():
        return _sigmoid(x.data)

    def backward(g):
        s = _sigmoid(x.data)
        return (s * (1.0 - s) * g,)

    return record_op("sigmoid", (x,), forward(), forward, backward)


def exp(x: Tensor) -> Tensor:
    def forward():
        return np.exp(x.data)

    def backward(g):
        return (np.exp(x.data) * g,)

    return record_op("exp", (x,), forward(), forward, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def forward():
        return a.data + b.data

    def backward(g):
        return g, g

    return record_op("add", (a, b), forward(), forward, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def forward():
        return a.data * b.data

    def backward(g):
        return b.data * g, a.data * g

    return record_op("mul", (a, b), forward(), forward, backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def forward():
        return x.data * c

    def backward(g):
        return (g * c,)

    return record_op("scale", (x,), forward(), forward, backward)


def softmax(logits: Tensor) -> Tensor:
    """Stable softmax of a 1-D vector (max subtraction before exp)."""
    if logits.data.ndim != 1:
        raise ShapeMismatchError(f"softmax expects a vector, got {logits.shape}")
    if logits.size == 0:
        raise ShapeMismatchError("softmax of an empty vector")

    def forward():
        z = logits.data - logits.data.max()
        e = np.exp(z)
        return e / e.sum()

    def backward(g):
        s = forward()
        return (s * (g - float(s @ g)),)

    return record_op("softmax", (logits,), forward(), forward, backward)


# ---------------------------------------------------------------------------
# structure ops
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    def forward():
        return np.asarray(x.data.sum())

    def backward(g):
        return (np.full_like(x.data, float(g)),)

    return record_op("sum_all", (x,), forward(), forward, backward)


def spatial_mean(v: Tensor) -> Tensor:
    """Per-channel mean over the two leading (spatial) axes of [h,w,d]."""
    if v.data.ndim != 3:
        raise ShapeMismatchError(f"spatial_mean expects [h,w,d], got {v.shape}")
    h, w, _ = v.shape

    def forward():
        return v.data.mean(axis=(0, 1))

    def backward(g):
        return (np.broadcast_to(g / (h * w), v.shape).copy(),)

    return record_op("spatial_mean", (v,), forward(), forward, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatchError(f"cannot reshape {x.shape} to {shape}")

    def forward():
        return x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return record_op("reshape", (x,), forward(), forward, backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeMismatchError("concat of zero vectors")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeMismatchError(f"concat expects vectors, got {p.shape}")
    sizes = [p.size for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def forward():
        return np.concatenate([p.data for p in parts])

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return record_op("concat", parts, forward(), forward, backward)


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeMismatchError(f"slice1d expects a vector, got {x.shape}")
    if not (0 <= start <= stop <= x.size):
        raise ShapeMismatchError(
            f"slice [{start}:{stop}] out of range for length {x.size}")

    def forward():
        return x.data[start:stop]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return record_op("slice1d", (x,), forward(), forward, backward)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    rows = tuple(rows)
    if not rows:
        raise ShapeMismatchError("stack_rows of zero vectors")
    n = rows[0].size
    for r in rows:
        if r.data.ndim != 1 or r.size != n:
            raise ShapeMismatchError("stack_rows requires equal-length vectors")

    def forward():
        return np.stack([r.data for r in rows])

    def backward(g):
        return tuple(g[i] for i in range(len(rows)))

    return record_op("stack_rows", rows, forward(), forward, backward)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows of a [n,d] table; gradient scatters back to those rows."""
    if table.data.ndim != 2:
        raise ShapeMismatchError(f"gather_rows expects a matrix, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatchError("gather_rows expects a flat id list")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row id out of range [0,{n}): {idx.tolist()}")

    def forward():
        return table.data[idx]

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return record_op("gather_rows", (table,), forward(), forward, backward)


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an [r,n] matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.size:
        raise ShapeMismatchError(
            f"add_rowvec shapes incompatible: {m.shape} and {v.shape}")

    def forward():
        return m.data + v.data

    def backward(g):
        return g, g.sum(axis=0)

    return record_op("add_rowvec", (m, v), forward(), forward, backward)
