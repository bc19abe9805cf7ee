"""Minimal reverse-mode autodiff on float64 numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient buffer.  Ops are plain
functions that compute forward values eagerly and, when a ``Tape`` is active
and an input requires grad, record a backward closure.  ``backward(loss)``
walks the active tape in reverse and accumulates gradients.

Conventions kept deliberately narrow:

* float64 everywhere; no dtype promotion.
* elementwise binary ops broadcast only over leading batch dimensions
  (the smaller operand's shape must equal the trailing shape of the larger)
  or against scalars; anything else is a ShapeError.
* any non-finite value produced by a forward op raises NonFiniteError at the
  op that produced it rather than propagating.
* calling ``backward`` twice without clearing grads accumulates into ``grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class EngineError(Exception):
    pass


class ShapeError(EngineError):
    pass


class DomainError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


class Tensor:
    """Float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level ops
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "bwd")

    def __init__(self, out, bwd):
        self.out = out
        self.bwd = bwd


_TAPES: list["Tape"] = []


class Tape:
    """Records ops for one backward pass.  Use as a context manager.

    The tape is not cleared by ``backward``; it dies with the context, so a
    second ``backward`` inside the same context accumulates gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)

def _record(out: Tensor, bwd) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(_Node(out, bwd))


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


def _bcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if a.ndim > b.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if b.ndim > a.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} only broadcast over leading batch dims")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over leading axes so it matches a broadcast input's shape."""
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(tensor) into ``grad`` of every
    requires_grad tensor reachable from ``loss`` on the active tape."""
    tape = _active_tape()
    if tape is None:
        raise EngineError("backward: no active Tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = local.pop(id(node.out), None)
        if g is None:
            continue
        owners.pop(id(node.out), None)
        if node.out.requires_grad:
            node.out.grad = g if node.out.grad is None else node.out.grad + g
        for t, gt in node.bwd(g):
            if not t.requires_grad:
                continue
            k = id(t)
            if k in local:
                local[k] = local[k] + gt
            else:
                local[k] = gt
                owners[k] = t
    for k, g in local.items():
        t = owners[k]
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bcast_check("add", a.data, b.data)
    out_data = a.data + b.data
    _check_finite("add", out_data)
    out = Tensor(out_data, a.requires_grad or b.requires_grad)

    def bwd(g):
        return (a, _reduce_to(g, a.data.shape)), (b, _reduce_to(g, b.data.shape))

    _record(out, bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bcast_check("sub", a.data, b.data)
    out_data = a.data - b.data
    _check_finite("sub", out_data)
    out = Tensor(out_data, a.requires_grad or b.requires_grad)

    def bwd(g):
        return (a, _reduce_to(g, a.data.shape)), (b, _reduce_to(-g, b.data.shape))

    _record(out, bwd)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data, a.requires_grad)

    def bwd(g):
        return ((a, -g),)

    _record(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bcast_check("mul", a.data, b.data)
    out_data = a.data * b.data
    _check_finite("mul", out_data)
    out = Tensor(out_data, a.requires_grad or b.requires_grad)

    def bwd(g):
        return (a, _reduce_to(g * b.data, a.data.shape)), (b, _reduce_to(g * a.data, b.data.shape))

    _record(out, bwd)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bcast_check("div", a.data, b.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    _check_finite("div", out_data)
    out = Tensor(out_data, a.requires_grad or b.requires_grad)

    def bwd(g):
        ga = _reduce_to(g / b.data, a.data.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)
        return (a, ga), (b, gb)

    _record(out, bwd)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        out_data = a.data @ b.data
    _check_finite("matmul", out_data)
    out = Tensor(out_data, a.requires_grad or b.requires_grad)

    def bwd(g):
        return (a, g @ b.data.T), (b, a.data.T @ g)

    _record(out, bwd)
    return out


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis)
    _check_finite("sum", np.atleast_1d(out_data))
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape)),)
        return ((a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape)),)

    _record(out, bwd)
    return out


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis)
    _check_finite("mean", np.atleast_1d(out_data))
    out = Tensor(out_data, a.requires_grad)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(g / n, a.data.shape)),)
        return ((a, np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape)),)

    _record(out, bwd)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    _check_finite("exp", out_data)
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        return ((a, g * out_data),)

    _record(out, bwd)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log: input has non-positive entries")
    out_data = np.log(a.data)
    _check_finite("log", out_data)
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        return ((a, g / a.data),)

    _record(out, bwd)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        return ((a, g * (1.0 - out_data * out_data)),)

    _record(out, bwd)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = expit(a.data)
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        return ((a, g * out_data * (1.0 - out_data)),)

    _record(out, bwd)
    return out


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        return ((a, g * expit(a.data)),)

    _record(out, bwd)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return ((a, out_data * (g - inner)),)

    _record(out, bwd)
    return out


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    if p != round(p) and (a.data < 0).any():
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    out_data = a.data ** p
    _check_finite("power", out_data)
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    _record(out, bwd)
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data < 0).any():
        raise DomainError("sqrt: negative input")
    out_data = np.sqrt(a.data)
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        return ((a, g * 0.5 / out_data),)

    _record(out, bwd)
    return out


def cumsum(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    out_data = np.cumsum(a.data, axis=axis)
    _check_finite("cumsum", out_data)
    out = Tensor(out_data, a.requires_grad)

    def bwd(g):
        return ((a, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)),)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    out = Tensor(out_data, any(t.requires_grad for t in ts))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(zip(ts, pieces))

    _record(out, bwd)
    return out


def slice_(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index], a.requires_grad)

    def bwd(g):
        z = np.zeros_like(a.data)
        z[index] = g
        return ((a, z),)

    _record(out, bwd)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def bwd(g):
        return ((a, g.reshape(a.data.shape)),)

    _record(out, bwd)
    return out


def take_columns(a, cols) -> Tensor:
    """Select columns of a 2-D tensor by an integer index array (unique indices)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_columns: expects 2-D input, got {a.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    out = Tensor(a.data[:, cols], a.requires_grad)

    def bwd(g):
        z = np.zeros_like(a.data)
        z[:, cols] = g
        return ((a, z),)

    _record(out, bwd)
    return out


def put_columns(base, cols, values) -> Tensor:
    """Copy of ``base`` with columns ``cols`` replaced by ``values``."""
    base, values = _as_tensor(base), _as_tensor(values)
    if base.ndim != 2 or values.ndim != 2:
        raise ShapeError(f"put_columns: expects 2-D inputs, got {base.shape} and {values.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    if values.shape != (base.shape[0], len(cols)):
        raise ShapeError(f"put_columns: values shape {values.shape} does not match {len(cols)} columns")
    out_data = base.data.copy()
    out_data[:, cols] = values.data
    out = Tensor(out_data, base.requires_grad or values.requires_grad)

    def bwd(g):
        gb = g.copy()
        gb[:, cols] = 0.0
        return (base, gb), (values, g[:, cols])

    _record(out, bwd)
    return out


def gather(a, idx) -> Tensor:
    """take_along_axis over the last axis; idx shape must match a's leading dims."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[:-1] != a.data.shape[:-1]:
        raise ShapeError(f"gather: index shape {idx.shape} does not match input {a.shape}")
    out = Tensor(np.take_along_axis(a.data, idx, axis=-1), a.requires_grad)

    def bwd(g):
        k = a.data.shape[-1]
        flat = np.zeros((a.data.size // k, k))
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (rows, idx.reshape(flat.shape[0], -1)), g.reshape(flat.shape[0], -1))
        return ((a, flat.reshape(a.data.shape)),)

    _record(out, bwd)
    return out


def where(cond, a, b) -> Tensor:
    """Elementwise select by a constant boolean mask (no gradient through cond)."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out_data = np.where(cond, a.data, b.data)
    _check_finite("where", out_data)
    out = Tensor(out_data, a.requires_grad or b.requires_grad)

    def bwd(g):
        ga = _reduce_to(np.where(cond, g, 0.0), a.data.shape)
        gb = _reduce_to(np.where(cond, 0.0, g), b.data.shape)
        return (a, ga), (b, gb)

    _record(out, bwd)
    return out


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) via im2col.

    x: [B, C, H, W], w: [O, C, k, k], b: [O] or None.  Output
    [B, O, Ho, Wo] with Ho = (H + 2*padding - k)//stride + 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-D x and w, got {x.shape} and {w.shape}")
    bsz, cin, h_in, w_in = x.shape
    cout, cin2, k, k2 = w.shape
    if cin != cin2 or k != k2:
        raise ShapeError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    h_out = (h_in + 2 * padding - k) // stride + 1
    w_out = (w_in + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B, C, Ho, Wo, k, k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * h_out * w_out, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out_mat = cols @ wmat.T
    if b is not None:
        b = _as_tensor(b)
        out_mat = out_mat + b.data
    out_data = out_mat.reshape(bsz, h_out, w_out, cout).transpose(0, 3, 1, 2)
    _check_finite("conv2d", out_data)
    req = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    out = Tensor(out_data, req)

    def bwd(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(bsz * h_out * w_out, cout)
        gw = (g_mat.T @ cols).reshape(w.data.shape)
        g_cols = (g_mat @ wmat).reshape(bsz, h_out, w_out, cin, k, k)
        gxp = np.zeros((bsz, cin, h_in + 2 * padding, w_in + 2 * padding))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h_out * stride:stride, j:j + w_out * stride:stride] += (
                    g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        gx = gxp[:, :, padding:padding + h_in, padding:padding + w_in] if padding else gxp
        pairs = [(x, gx), (w, gw)]
        if b is not None:
            pairs.append((b, g_mat.sum(axis=0)))
        return tuple(pairs)

    _record(out, bwd)
    return out


OPS = {
    "add": add, "sub": sub, "neg": neg, "mul": mul, "div": div, "matmul": matmul,
    "sum": sum_, "mean": mean, "exp": exp, "log": log, "tanh": tanh,
    "sigmoid": sigmoid, "softplus": softplus, "softmax": softmax, "power": power,
    "sqrt": sqrt, "cumsum": cumsum, "concat": concat, "slice": slice_,
    "reshape": reshape, "take_columns": take_columns, "put_columns": put_columns,
    "gather": gather, "where": where, "conv2d": conv2d,
}


def forward_op(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch an op by name; used by tests to sweep the op table."""
    if kind not in OPS:
        raise EngineError(f"forward_op: unknown op '{kind}'")
    return OPS[kind](*args, **kwargs)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moment buffers and step counter, keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One Adam update with bias correction; returns new parameter arrays.

    ``params`` and ``grads`` map name -> ndarray.  Mutates ``state`` in place.
    A non-finite gradient is an error naming the offending parameter.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter '{name}'")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


class Adam:
    """Adam over a dict of named parameter Tensors, reading their .grad buffers."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        arrays = {name: t.data for name, t in self.params.items()}
        grads = {}
        for name, t in self.params.items():
            if t.grad is None:
                grads[name] = np.zeros_like(t.data)
            else:
                grads[name] = t.grad
        new = adam_step(arrays, grads, self.state)
        for name, t in self.params.items():
            t.data[...] = new[name]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of scalar f(x) and
    central differences: max_i |a_i - n_i| / (|a_i| + |n_i| + 1e-12)."""
    x.grad = None
    with Tape():
        out = f(x)
        backward(out)
    analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max())
