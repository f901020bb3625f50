"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient, so inference runs with no bookkeeping at all::

    with Tape() as tape:
        loss = (conv2d(x, w, b, 1, 1) * 2.0).mean()
    tape.backward(loss)
    w.grad  # populated

Layout is NCHW everywhere.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, DimensionError, EvaluationError

DTYPE = np.float32

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

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
        return transpose(self, axes)


class Node(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records differentiable operations in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``."""
        if seed is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar loss or explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=DTYPE)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                seen[key] = t
                grads[key] = grads[key] + gi if key in grads else gi
        for key, g in grads.items():
            t = seen[key]
            if t.requires_grad:
                t.grad = np.array(g, dtype=DTYPE).reshape(t.shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(DTYPE)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _result("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a: Tensor) -> Tensor:
    # sign(0) = 0 selects the zero subgradient
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s
    return _result("silu", out, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / max(n, 1))


def reshape(a: Tensor, shape) -> Tensor:
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _result("getitem", a.data[idx], (a,), backward)


# ---------------------------------------------------------------- layers


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an (Cout, Cin, K, K) filter bank."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-d NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-d, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel axis (1) mismatch: input has {cin}, weight expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias axis 0 must be {cout}, got shape {bias.shape}")
    if stride < 1 or padding < 0:
        raise ArgumentError("stride must be >= 1 and padding >= 0")
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d spatial axes (2, 3) too small for kernel {k}: input {h}x{w}")

    xd = x.data
    if padding:  # np.pad's generality costs more than the copy at these sizes
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = xd
        xd = xp
    hp, wp = xd.shape[2], xd.shape[3]
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, :hs:stride, :ws:stride]
    # columns as (cin*k*k, n*ho*wo): the gather then copies whole image rows
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * k * k, n * ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo)
    out = out[:, 0][None] if n == 1 else np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        dw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, k, k, n, ho, wo)
            dxp = np.zeros((n, cin, hp, wp), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, backward)


def channel_scale(x: Tensor, lam: Tensor) -> Tensor:
    """Multiply every channel plane of ``x`` by its own scalar."""
    if x.ndim != 4 or lam.ndim != 1 or lam.shape[0] != x.shape[1]:
        raise DimensionError(f"channel_scale: scale length {lam.shape} does not match channel axis of {x.shape}")
    lv = lam.data[None, :, None, None]
    return _result("channel_scale", x.data * lv, (x, lam),
                   lambda g: (g * lv, (g * x.data).sum(axis=(0, 2, 3))))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ArgumentError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _result("upsample", x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _result("upsample", out, (x,),
                   lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(f"concat_channels: axis {axis} mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _result("concat", np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------- probability


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = x.data - x.data.max(axis=axis, keepdims=True)
    out = s - np.log(np.exp(s).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _result("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax_with_temperature(x: Tensor, temperature: float, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise ArgumentError(f"temperature must be positive, got {temperature}")
    z = x.data / DTYPE(temperature)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / DTYPE(temperature),)

    return _result("softmax_t", out, (x,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum of elementwise binary cross-entropy, stable for large |logit|."""
    z = logits.data
    y = np.asarray(targets, dtype=DTYPE)
    wt = np.ones_like(z) if weights is None else np.asarray(weights, dtype=DTYPE)
    elem = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((elem * wt).sum(dtype=np.float64), dtype=DTYPE)
    return _result("bce", out, (logits,), lambda g: (g * (_sigmoid(z) - y) * wt,))


def smooth_l1(pred: Tensor, target: np.ndarray, weights: np.ndarray | None = None, beta: float = 1.0) -> Tensor:
    d = pred.data - np.asarray(target, dtype=DTYPE)
    ad = np.abs(d)
    wt = np.ones_like(d) if weights is None else np.asarray(weights, dtype=DTYPE)
    elem = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = np.asarray((elem * wt).sum(dtype=np.float64), dtype=DTYPE)
    return _result("smooth_l1", out, (pred,),
                   lambda g: (g * np.where(ad < beta, d / beta, np.sign(d)) * wt,))


# ---------------------------------------------------------------- validation


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    base = np.array(x.data, dtype=DTYPE)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise EvaluationError("function is not finite at the base point")
    tape.backward(y)
    analytic = np.zeros(base.size) if xt.grad is None else xt.grad.astype(np.float64).ravel()

    flat = base.ravel()
    numeric = np.empty(base.size)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += DTYPE(eps)
        lo[i] -= DTYPE(eps)
        fp = float(f(Tensor(hi.reshape(base.shape))).data)
        fm = float(f(Tensor(lo.reshape(base.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"function is not finite near coordinate {i}")
        numeric[i] = (fp - fm) / (float(hi[i]) - float(lo[i]))
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
