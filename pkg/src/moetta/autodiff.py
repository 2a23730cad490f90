"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the active :class:`Tape` only when at least
one input requires a gradient and a tape is open. Outside a tape every op is
a plain numpy computation, which is what inference and the Noadapt control
use.

Detached values (``detach``, ``detach_scale``, ``frozen``) can be recorded on
a first evaluation and replayed on later ones. ``grad_check`` relies on this:
the finite-difference oracle differentiates the function with every detached
quantity held at its base-point value, which is exactly the derivative the
tape computes.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)
_CONSTANTS: contextvars.ContextVar["_ConstantLog | None"] = contextvars.ContextVar(
    "constant_log", default=None
)


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "node")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _scalar_error(t: Tensor):
    raise DimensionError(f"expected a single-element tensor, got shape {t.shape}")


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside append to ``records`` in
    execution order, which is a valid topological order.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, root: Tensor) -> None:
        if root.values.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
        leaves: dict[int, Tensor] = {}
        if root.node is None:
            leaves[id(root)] = root
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp.node is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.broadcast_to(g, leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(root: Tensor) -> None:
    """Backpropagate from ``root`` through the currently open tape."""
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    tape.backward(root)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_values: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(out_values)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = len(tape.records)
        tape.records.append(_Record(inputs, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av / bv

    def bwd(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _record(out, (a, b), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.values
    if np.any(xv <= 0):
        raise NumericError("log of a non-positive value")
    return _record(np.log(xv), (x,), lambda g: (g / xv,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def square(x: Tensor) -> Tensor:
    xv = x.values
    return _record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xv = x.values
    x2 = xv * xv
    inner = _GELU_C * xv * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner),)

    return _record(out, (x,), bwd)


def xlogx(x: Tensor) -> Tensor:
    """Elementwise x*ln(x) with 0*ln(0) := 0."""
    xv = x.values
    if np.any(xv < 0):
        raise NumericError("xlogx of a negative value")
    pos = xv > 0
    logs = np.where(pos, np.log(np.where(pos, xv, 1.0)), 0.0)
    return _record(xv * logs, (x,), lambda g: (g * np.where(pos, logs + 1.0, 0.0),))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xv = x.values
    out = xv.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape),)

    return _record(np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xv = x.values
    if axis is None:
        n = xv.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([xv.shape[a] for a in axes]))
    out = xv.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xv.shape),)

    return _record(np.asarray(out), (x,), bwd)


# ---------------------------------------------------------------- structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv

    def bwd(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            # shared weight: fold the batch dims into one contraction
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return _unbroadcast(ga, av.shape), gb

    return _record(out, (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    xv = x.values

    def bwd(g):
        full = np.zeros_like(xv)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.asarray(xv[index]), (x,), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``x[idx]`` along axis 0 for an integer index array."""
    idx = np.asarray(idx)
    xv = x.values

    def bwd(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return (full,)

    return _record(xv[idx], (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = np.broadcast_to(x.values, shape).copy()
    return _record(out, (x,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------- fused ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xv = x.values
    if xv.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    if not np.all(np.isfinite(xv)):
        raise NumericError("softmax received non-finite input")
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xv = x.values
    if not np.all(np.isfinite(xv)):
        raise NumericError("log_softmax received non-finite input")
    shifted = xv - xv.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bwd)


def normalize(x: Tensor, eps: float) -> Tensor:
    """Zero-mean, unit-variance over the last axis (biased variance)."""
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if not np.all(np.isfinite(var)):
        raise NumericError("non-finite variance in normalization")
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------- detaching


class _ConstantLog:
    """Records detached values on the first pass, replays them afterwards."""

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.replay = False
        self.cursor = 0

    def __call__(self, arr: np.ndarray) -> np.ndarray:
        if self.replay:
            v = self.values[self.cursor]
            self.cursor += 1
            return v
        self.values.append(np.array(arr, copy=True))
        return arr


def frozen(arr: np.ndarray) -> np.ndarray:
    """Mark a non-differentiable value (mask, index, count) as a constant.

    A no-op unless a grad-check is recording or replaying constants.
    """
    log_ = _CONSTANTS.get()
    return arr if log_ is None else log_(arr)


def detach(x: Tensor) -> Tensor:
    return Tensor(frozen(x.values.copy()), requires_grad=False)


def detach_scale(p: Tensor) -> Tensor:
    """``p / detach(p)``: forward value 1, gradient 1/p."""
    if np.any(p.values <= 0):
        raise NumericError("detach_scale requires strictly positive input")
    return div(p, detach(p))


# ---------------------------------------------------------------- grad check


def _collect_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
        tape.backward(out)
    return out.item(), [
        np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params
    ]


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be deterministic. Detached values seen on the first call are
    held fixed for the perturbed calls. ``max_coords`` checks a random subset
    of coordinates per parameter.
    """
    log_ = _ConstantLog()
    token = _CONSTANTS.set(log_)
    try:
        _, analytic = _collect_grads(f, params)
        log_.replay = True
        rng = np.random.default_rng(seed)
        worst = 0.0
        for p, ga in zip(params, analytic):
            flat = p.values.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                log_.cursor = 0
                fp = f().item()
                flat[i] = orig - step
                log_.cursor = 0
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                an = ga.reshape(-1)[i]
                err = abs(an - num) / (abs(an) + abs(num) + 1e-12)
                # both sides at round-off level: nothing to compare
                if abs(an) < 1e-10 and abs(num) < 1e-8:
                    err = 0.0
                worst = max(worst, err)
        return worst
    finally:
        _CONSTANTS.reset(token)


def parameters_with_grad(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.requires_grad]


__all__ = [
    "DTYPE",
    "DimensionError",
    "NumericError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "concat",
    "detach",
    "detach_scale",
    "div",
    "exp",
    "frozen",
    "gelu",
    "getitem",
    "grad_check",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "normalize",
    "reshape",
    "softmax",
    "square",
    "sub",
    "sum",
    "take_rows",
    "tanh",
    "tensor",
    "transpose",
    "xlogx",
]
