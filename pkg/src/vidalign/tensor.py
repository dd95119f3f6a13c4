"""Dense float64 tensors with tape-based reverse-mode differentiation.

Gradients are only recorded while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # == 2 * x.data

Broadcasting is restricted to scalar-with-tensor; anything else goes
through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Optional, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "vidalign_active_tape", default=None
)


class TensorError(ValueError):
    """Shape, domain or tape misuse."""


class NonFiniteError(TensorError):
    """A public operation produced NaN or Inf."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def ones(*shape) -> Tensor:
    return Tensor._wrap(np.ones(shape))


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records differentiable operations for one backward pass.

    A tape is single-use and must stay on the thread that created it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TensorError("tape already consumed")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        if self._consumed:
            raise TensorError("tape already consumed")
        self.nodes.append(_Node(tuple(inputs), output, backward))
        self._outputs.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires_grad leaf reached from ``loss``."""
        if self._consumed:
            raise TensorError("tape already consumed")
        if loss.size != 1 or loss.ndim > 1:
            raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise TensorError("loss is detached from this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in self._outputs:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        for key, leaf in leaves.items():
            g = grads.get(key)
            _check_finite(g, "backward")
            leaf.grad = g
        self.nodes.clear()
        self._outputs.clear()
        self._consumed = True


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable, what: str) -> Tensor:
    _check_finite(out, what)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        tape = _active_tape.get()
        if tape is not None:
            tape.record(inputs, result, backward)
    return result


# ---------------------------------------------------------------- elementwise

def _binary_shapes(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise TensorError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unscalar(g * bd, a), _unscalar(g * ad, b)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise TensorError("div: division by zero")
    out = ad / bd

    def backward(g):
        return _unscalar(g / bd, a), _unscalar(-g * out / bd, b)

    return _make(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * d,)

    return _make(out, (a,), backward, "gelu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig
    return _make(out, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),), "silu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise TensorError("log: non-positive input")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise TensorError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


_UNARY = {"gelu": gelu, "silu": silu, "exp": exp, "log": log, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add/sub/mul/div, scale (b is a constant), or a unary kind."""
    if kind in _BINARY:
        if b is None:
            raise TensorError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(_as_tensor(a), b)
    if kind in _UNARY:
        return _UNARY[kind](_as_tensor(a))
    raise TensorError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]`` with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise TensorError(f"matmul: batch dims {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of x; w is ``[in, out]``."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, broadcast_to(b, y.shape))
    return y


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise TensorError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max / norm (L2) over ``axis``."""
    axes = _norm_axes(axis, a.ndim)
    for ax in axes:
        if a.shape[ax] == 0:
            raise TensorError("empty reduction axis")
    x = a.data
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)
    elif kind == "mean":
        out = x.mean(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)
    elif kind == "max":
        out = x.max(axis=axes, keepdims=keepdims)

        def backward(g):
            m = out.reshape(kept_shape)
            mask = (x == m).astype(np.float64)
            mask /= mask.sum(axis=axes, keepdims=True)
            return (mask * g.reshape(kept_shape),)
    elif kind == "norm":
        out = np.sqrt((x * x).sum(axis=axes, keepdims=keepdims))

        def backward(g):
            n = out.reshape(kept_shape)
            if np.any(n == 0):
                raise TensorError("norm: gradient undefined at zero")
            return (x / n * g.reshape(kept_shape),)
    else:
        raise TensorError(f"unknown reduction {kind!r}")
    return _make(np.asarray(out, dtype=np.float64), (a,), backward, kind)


def norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("norm", a, axis, keepdims)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise TensorError(str(exc)) from None
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; backward sums over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise TensorError(str(exc)) from None
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(np.array(out), (a,), backward, "broadcast_to")


def index(a: Tensor, idx) -> Tensor:
    """Basic (slice / integer) indexing."""
    out = a.data[idx]
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        full[idx] += g
        return (full,)

    return _make(np.array(out), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, backward, "concat")


# ---------------------------------------------------------------- composite layers

def layernorm(a: Tensor, scale_: Optional[Tensor] = None, shift: Optional[Tensor] = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then optional affine ``* scale + shift``."""
    n = a.shape[-1]
    for p in (scale_, shift):
        if p is not None and p.shape != (n,):
            raise TensorError(f"layernorm: affine shape {p.shape} vs last axis {n}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gamma = scale_.data if scale_ is not None else None
    out = xhat * gamma if gamma is not None else xhat
    if shift is not None:
        out = out + shift.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma if gamma is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if scale_ is not None:
            grads.append((g * xhat).sum(axis=lead))
        if shift is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    inputs = [a] + [p for p in (scale_, shift) if p is not None]
    return _make(out, inputs, backward, "layernorm")


def _softmax_np(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, a.ndim - 1):
        raise TensorError("softmax only over the last axis")
    p = _softmax_np(a.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), backward, "softmax")


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic scaled dot-product weights (no gradient)."""
    return _softmax_np((q @ np.swapaxes(k, -1, -2)) / math.sqrt(q.shape[-1]))


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over ``[..., seq, dim]`` operands."""
    if q.shape[-2] == 0 or k.shape[-2] == 0:
        raise TensorError("attention over a zero-length sequence")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-1] != v.shape[:-1] or q.shape[-1] != k.shape[-1]:
        raise TensorError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    s = 1.0 / math.sqrt(q.shape[-1])
    p = _softmax_np((qd @ np.swapaxes(kd, -1, -2)) * s)
    out = p @ vd

    def backward(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(vd, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * s
        dq = ds @ kd
        dk = np.swapaxes(ds, -1, -2) @ qd
        return dq, dk, dv

    return _make(out, (q, k, v), backward, "softmax_attention")


def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    return reduce("mean", mul(d, d))


def cosine_similarity(a: Tensor, b, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Cosine along ``axis``; zero-norm vectors raise unless ``eps`` > 0."""
    b = _as_tensor(b)
    dot = reduce("sum", mul(a, b), axis)
    na = reduce("norm", a, axis)
    nb = reduce("norm", b, axis)
    denom = mul(na, nb)
    if eps:
        denom = add(denom, eps)
    return div(dot, denom)
