"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op takes :class:`Tensor` inputs, computes its forward value with numpy
and records a closure mapping the output gradient to input gradients.
:func:`backward` walks the recorded graph in reverse topological order.

Feature maps are channel-last throughout (``[..., H, W, C]``).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "from_op",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "silu",
    "maximum",
    "matmul",
    "sum",
    "mean",
    "amax",
    "reshape",
    "transpose",
    "concat",
    "broadcast_to",
    "softmax_lastdim",
    "channel_norm",
    "pointwise_linear",
    "conv2d",
    "resize_bilinear",
    "bilinear_up2x",
    "bce_with_logits",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    """An n-d float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named learnable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op with the given parents.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or ``None``) per parent, in order.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable grad tensor.

    Gradients add onto whatever is already stored; call :func:`zero_grad`
    between independent evaluations.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            # leaves own their buffer; intermediates may alias a child's gradient
            node.grad = g.copy() if node._backward is None else g
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return from_op(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return from_op(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return from_op(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return from_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_np(x)
    return from_op(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return from_op(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
    )


# ------------------------------------------------------------------ linear alg


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return from_op(out, (a, b), bw)


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return from_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return div(sum(a, axes, keepdims), float(count))


def amax(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)
    shape = a.shape

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros(shape)
        np.put_along_axis(full, idx_k, gk, axis=axis)
        return (full,)

    return from_op(out, (a,), bw)


# -------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return from_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return from_op(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return from_op(out, tensors, bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return from_op(out, (a,), lambda g: (_unbroadcast(g, src),))


# ------------------------------------------------------------------ nn pieces


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable bool, True = keep) removes entries from the
    distribution: they get probability exactly 0. Every row must keep at
    least one entry.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    if not np.isfinite(zmax).all():
        raise NonFiniteError("softmax row has no unmasked entries")
    e = np.exp(z - zmax)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return from_op(out, (x,), bw)


def channel_norm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = 1e-5,
    axis: int = -1,
) -> Tensor:
    """Zero-mean / unit-variance normalisation along ``axis``, then affine.

    Variance is the biased estimator; ``eps`` is added before the square root.
    ``gamma`` and ``beta`` broadcast against the output.
    """
    axis = axis % x.ndim
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    y = from_op(xhat, (x,), bw)
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def pointwise_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-position affine map over the trailing channel axis (a 1x1 conv)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"channel mismatch: input {x.shape}, weight {w.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    y = matmul(flat, w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int):
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(1, 2))
    # win: [B, Hp-span_h+1, Wp-span_w+1, C, span_h, span_w]
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win[..., ::dilation, ::dilation]


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-d cross-correlation on ``[B, H, W, Cin]`` with weight ``[kh, kw, Cin, Cout]``.

    Zero padding of ``pad`` pixels on every side.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d shapes incompatible: input {x.shape}, weight {w.shape}")
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = _conv_windows(xp, kh, kw, stride, dilation, ho, wo)
    wd_ = w.data
    out = np.tensordot(win, wd_, axes=([3, 4, 5], [2, 0, 1]))

    def bw(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += (
                        g @ wd_[i, j].T
                    )
            gx = gxp[:, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw

    y = from_op(out, (x, w), bw)
    return add(y, b) if b is not None else y


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge clamped (align_corners=False)
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of ``[B, H, W, C]`` (half-pixel centres)."""
    if x.ndim != 4:
        raise ShapeError("resize_bilinear expects [B, H, W, C]")
    mh = _bilinear_matrix(x.shape[1], out_h)
    mw = _bilinear_matrix(x.shape[2], out_w)
    out = np.einsum("ip,bpqc,jq->bijc", mh, x.data, mw, optimize=True)
    return from_op(out, (x,), lambda g: (np.einsum("ip,bijc,jq->bpqc", mh, g, mw, optimize=True),))


def bilinear_up2x(x: Tensor) -> Tensor:
    return resize_bilinear(x, 2 * x.shape[1], 2 * x.shape[2])


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a {0,1} target.

    Uses ``max(x,0) - x*g + log(1 + exp(-|x|))``.
    """
    g = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if g.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} vs target {g.shape}")
    if not np.isin(g, (0.0, 1.0)).all():
        raise ValueError("bce target must be binary {0, 1}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * g + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    return from_op(np.asarray(per.mean()), (logits,), lambda gr: (gr * (_sigmoid_np(x) - g) / n,))
