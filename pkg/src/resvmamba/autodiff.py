"""Minimal dense tensor with tape-based reverse-mode autodiff.

Every op records a :class:`TapeNode` holding its inputs and a closure that maps
the output gradient to input gradients.  ``Tensor.backward`` walks the graph
once in reverse creation order and then frees it.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "ShapeError",
    "DomainError",
    "BackwardError",
    "precision",
    "get_dtype",
    "no_grad",
    "set_debug",
    "tensor",
    "zeros",
    "ones",
    "ew_binary",
    "ew_unary",
    "matmul",
    "layer_norm",
    "depthwise_conv2d",
    "avg_pool2d",
    "log_softmax",
    "concat",
    "stack",
    "split",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "debug": os.environ.get("RESVMAMBA_DEBUG", "") not in ("", "0"),
}


def get_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str = "float64"):
    """Temporarily switch the default dtype for newly created tensors."""
    new = np.dtype(name)
    if new not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {name!r}")
    old = _state["dtype"]
    _state["dtype"] = new
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def set_debug(flag: bool) -> None:
    """Toggle the finite-output check run after every op."""
    _state["debug"] = bool(flag)


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    # keep numpy from hijacking reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not isinstance(data, np.ndarray) or arr.dtype not in (np.float32, np.float64):
            # float arrays keep their precision; everything else takes the default
            arr = arr.astype(get_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: TapeNode | None = None
        self.name = name

    # ------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -------------------------------------------------------- operators
    def __add__(self, other):
        return ew_binary("add", self, other)

    def __radd__(self, other):
        return ew_binary("add", other, self)

    def __sub__(self, other):
        return ew_binary("sub", self, other)

    def __rsub__(self, other):
        return ew_binary("sub", other, self)

    def __mul__(self, other):
        return ew_binary("mul", self, other)

    def __rmul__(self, other):
        return ew_binary("mul", other, self)

    def __truediv__(self, other):
        return ew_binary("div", self, other)

    def __neg__(self):
        return ew_unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def exp(self):
        return ew_unary("exp", self)

    def log(self):
        return ew_unary("log", self)

    def sqrt(self):
        return ew_unary("sqrt", self)

    def silu(self):
        return ew_unary("silu", self)

    def softplus(self):
        return ew_unary("softplus", self)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)

    # --------------------------------------------------------- backward
    def backward(self) -> None:
        """Populate ``.grad`` on every ``requires_grad`` leaf reachable from this scalar."""
        if self.data.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise BackwardError("backward called on a tensor that is not tracked")
        if self._node is not None and self._node.backward_fn is None:
            raise BackwardError("graph already consumed by a previous backward; rebuild the forward pass")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            node = t._node
            if node is None:
                if g is not None:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if g is not None:
                in_grads = node.backward_fn(g)
                for inp, ig in zip(node.inputs, in_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
            # free the tape as we go
            node.inputs = ()
            node.backward_fn = None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording a tape node when any input is tracked."""
    if _state["debug"] and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(i.data)) for i in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._node = TapeNode(op, tuple(inputs), backward_fn)
    return out


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Public hook for modules that define fused ops with their own backward rule."""
    return _make(data, inputs, backward_fn, op)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_dtype()), requires_grad=requires_grad)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the extents that broadcasting stretched to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ------------------------------------------------------------- elementwise
def ew_binary(kind: str, a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape} for {kind}") from None
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    if kind == "add":
        out = ad + bd

        def bw(g):
            return unbroadcast(g, sa), unbroadcast(g, sb)

    elif kind == "sub":
        out = ad - bd

        def bw(g):
            return unbroadcast(g, sa), unbroadcast(-g, sb)

    elif kind == "mul":
        out = ad * bd

        def bw(g):
            return (
                unbroadcast(g * bd, sa) if a.requires_grad else None,
                unbroadcast(g * ad, sb) if b.requires_grad else None,
            )

    elif kind == "div":
        out = ad / bd

        def bw(g):
            ga = unbroadcast(g / bd, sa) if a.requires_grad else None
            gb = unbroadcast(-g * ad / (bd * bd), sb) if b.requires_grad else None
            return ga, gb

    else:
        raise ValueError(f"unknown binary op {kind!r}")
    return _make(out, (a, b), bw, kind)


def _check_positive(x: np.ndarray, kind: str) -> None:
    bad = np.flatnonzero(~(x > 0))
    if bad.size:
        idx = np.unravel_index(bad[0], x.shape)
        raise DomainError(f"{kind} needs strictly positive input; got {x[idx]!r} at index {tuple(int(i) for i in idx)}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x: np.ndarray) -> np.ndarray:
    out = np.log1p(np.exp(np.minimum(x, 20.0)))
    return np.where(x > 20.0, x, out)


def ew_unary(kind: str, x: Tensor) -> Tensor:
    xd = x.data
    if kind == "exp":
        out = np.exp(xd)

        def bw(g):
            return (g * out,)

    elif kind == "log":
        _check_positive(xd, kind)
        out = np.log(xd)

        def bw(g):
            return (g / xd,)

    elif kind == "neg":
        out = -xd

        def bw(g):
            return (-g,)

    elif kind == "sqrt":
        _check_positive(xd, kind)
        out = np.sqrt(xd)

        def bw(g):
            return (g * 0.5 / out,)

    elif kind == "silu":
        sig = _sigmoid(xd)
        out = xd * sig

        def bw(g):
            return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    elif kind == "softplus":
        out = softplus_np(xd)

        def bw(g):
            return (g * _sigmoid(xd),)

    elif kind == "sigmoid":
        out = _sigmoid(xd)

        def bw(g):
            return (g * out * (1.0 - out),)

    else:
        raise ValueError(f"unknown unary op {kind!r}")
    return _make(out, (x,), bw, kind)


# ----------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcast leading extents."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # fold leading extents into rows: one BLAS call
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# -------------------------------------------------------------- reductions
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), bw, "sum")


def _mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return _sum(x, axes, keepdims) * (1.0 / count)


# ---------------------------------------------------------- shape plumbing
def _reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(src),)

    return _make(out, (x,), bw, "reshape")


def _transpose(x: Tensor, axes) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make(out, (x,), bw, "transpose")


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    shape, dtype = x.shape, x.dtype

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), bw, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Cut ``x`` into consecutive pieces of the given extents along ``axis``."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to extent {x.shape[axis]} of {x.shape}")
    pieces = []
    start = 0
    for n in sizes:
        idx = (slice(None),) * axis + (slice(start, start + n),)
        pieces.append(_getitem(x, idx))
        start += n
    return pieces


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, bw, "stack")


# ------------------------------------------------------------- fused layers
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last extent (population variance), then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent of {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gamma.data
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def depthwise_conv2d(x: Tensor, kernel: Tensor, padding: int, bias: Tensor | None = None) -> Tensor:
    """Per-channel 2-D cross-correlation, stride 1, zero padding. x is (B, C, H, W)."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d expects (B, C, H, W), got {x.shape}")
    C = x.shape[1]
    if kernel.ndim != 4 or kernel.shape[0] != C or kernel.shape[1] != 1 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel shape {kernel.shape} does not fit {C} channels (want ({C}, 1, k, k))")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"even kernel size {k} has no center")
    p = int(padding)
    B, _, H, W = x.shape
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {k} with padding {p} does not fit map {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    kd = kernel.data[:, 0]
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + Ho, j : j + Wo] * kd[:, i, j][None, :, None, None]
    inputs: tuple = (x, kernel)
    if bias is not None:
        out += bias.data[None, :, None, None]
        inputs = (x, kernel, bias)

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + Ho, j : j + Wo] += g * kd[:, i, j][None, :, None, None]
            gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i in range(k):
                for j in range(k):
                    gk[:, 0, i, j] = (g * xp[:, :, i : i + Ho, j : j + Wo]).sum(axis=(0, 2, 3))
        grads = (gx, gk)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None,)
        return grads

    return _make(out, inputs, bw, "depthwise_conv2d")


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping window mean over the two trailing spatial extents of (B, C, H, W)."""
    B, C, H, W = x.shape
    w = int(window)
    if w < 1 or H % w or W % w:
        raise ShapeError(f"spatial extents {H}x{W} not divisible by pooling window {w}")
    out = x.data.reshape(B, C, H // w, w, W // w, w).mean(axis=(3, 5))
    scale = 1.0 / (w * w)

    def bw(g):
        gx = np.broadcast_to((g * scale)[:, :, :, None, :, None], (B, C, H // w, w, W // w, w))
        return (gx.reshape(B, C, H, W),)

    return _make(out, (x,), bw, "avg_pool2d")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# ----------------------------------------------------------- gradient oracle
def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max-norm relative error between autodiff and central differences of ``f`` at ``x``.

    Returns ``max|a - n| / max(max|a|, max|n|)`` over the checked coordinates.
    Scaling by the largest gradient rather than per coordinate keeps
    near-zero entries from turning difference noise into large ratios.
    ``x`` must be float64.  ``indices`` restricts the comparison to a subset of
    flat coordinates; by default every coordinate is checked.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs a float64 tensor; wrap the setup in precision('float64')")
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    loss.backward()
    analytic = (np.zeros_like(x.data) if x.grad is None else x.grad).reshape(-1)
    flat = x.data.reshape(-1)
    idx = list(range(flat.size) if indices is None else indices)
    numeric = np.empty(len(idx))
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data.sum())
            flat[i] = orig - eps
            fm = float(f(x).data.sum())
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * eps)
    a = analytic[idx]
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - numeric).max()) / scale
