"""Reverse-mode differentiation over float64 numpy arrays.

Operations are recorded onto a :class:`Trace` while they execute. The trace
can later be replayed with different leaf values (:func:`evaluate`),
differentiated (:func:`gradient`) and checked against central finite
differences (:func:`check_gradient`).

Primitives called with plain arrays (no :class:`Var` among the arguments)
compute eagerly and return arrays, so the same model and loss code serves
both training and inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

NORM_FLOOR = 1e-8


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, node: str, expected: Any, actual: Any):
        self.node = node
        self.expected = expected
        self.actual = actual
        super().__init__(f"{node}: expected {expected}, got {actual}")


class NonFiniteError(FloatingPointError):
    def __init__(self, node: str):
        self.node = node
        super().__init__(f"non-finite value produced at node {node}")


class DegenerateNormError(ValueError):
    """l2_normalize received a vector whose norm is below ``NORM_FLOOR``."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    name: str | None = None
    kind: str = "op"  # "op", "input", "param" or "const"


class Trace:
    """Ordered record of executed primitives; node i only reads nodes < i."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.outputs: dict[str, int] = {}
        self._names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf(self, kind: str, name: str | None, value) -> Var:
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(name or kind)
        if name is not None:
            if name in self._names:
                raise KeyError(f"duplicate leaf name {name!r}")
            self._names[name] = len(self.nodes)
        self.nodes.append(Node(kind, (), {}, arr, name=name, kind=kind))
        return Var(self, len(self.nodes) - 1)

    def param(self, name: str, value) -> Var:
        """Differentiable leaf."""
        return self._leaf("param", name, value)

    def input(self, name: str, value) -> Var:
        """Named non-differentiable leaf that :func:`evaluate` can rebind."""
        return self._leaf("input", name, value)

    def const(self, value) -> Var:
        return self._leaf("const", None, value)

    def output(self, name: str, var: Var) -> Var:
        if var.trace is not self:
            raise ValueError("variable belongs to another trace")
        self.outputs[name] = var.index
        return var

    @property
    def params(self) -> dict[str, int]:
        return {n.name: i for i, n in enumerate(self.nodes) if n.kind == "param"}

    def _record(self, op: str, inputs: tuple[int, ...], attrs: dict, value) -> Var:
        self.nodes.append(Node(op, inputs, attrs, value))
        return Var(self, len(self.nodes) - 1)


class Var:
    """Handle on a trace node. Supports the usual arithmetic operators."""

    __array_priority__ = 100

    def __init__(self, trace: Trace, index: int):
        self.trace = trace
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.trace.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        node = self.trace.nodes[self.index]
        return f"Var(#{self.index} {node.op}, shape={self.shape})"

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
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., np.ndarray]
    # vjp(grad_out, input_values, output_value, **attrs) -> tuple of input grads
    vjp: Callable[..., tuple]


PRIMITIVES: dict[str, Primitive] = {}


def _prim(name: str, vjp: Callable):
    def register(forward):
        PRIMITIVES[name] = Primitive(forward, vjp)
        return forward

    return register


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"shape broadcastable with {a.shape}", b.shape) from None


def _f_add(a, b):
    _check_broadcast("add", a, b)
    return a + b


def _f_sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b


def _f_mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b


def _f_div(a, b):
    _check_broadcast("div", a, b)
    return a / b


_prim("add", lambda g, xs, out: (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)))(_f_add)
_prim("sub", lambda g, xs, out: (_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)))(_f_sub)
_prim(
    "mul",
    lambda g, xs, out: (_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)),
)(_f_mul)
_prim(
    "div",
    lambda g, xs, out: (
        _unbroadcast(g / xs[1], xs[0].shape),
        _unbroadcast(-g * xs[0] / xs[1] ** 2, xs[1].shape),
    ),
)(_f_div)


@_prim("scale", lambda g, xs, out, c: (g * c,))
def _f_scale(a, c):
    return a * c


@_prim("shift", lambda g, xs, out, c: (g,))
def _f_shift(a, c):
    return a + c


def _vjp_matmul(g, xs, out):
    a, b = xs
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


@_prim("matmul", _vjp_matmul)
def _f_matmul(a, b):
    if a.ndim > 2 or b.ndim > 2 or a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", "1-d or 2-d operands", (a.shape, b.shape))
    if a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dimension {a.shape[-1]}", b.shape[0])
    return a @ b


@_prim("dot", lambda g, xs, out: (g * xs[1], g * xs[0]))
def _f_dot(a, b):
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", f"two vectors of shape {a.shape}", b.shape)
    return np.cumsum(a * b)[-1]


@_prim("transpose", lambda g, xs, out: (g.T,))
def _f_transpose(a):
    return a.T


@_prim("relu", lambda g, xs, out: (g * (xs[0] > 0),))
def _f_relu(a):
    return np.maximum(a, 0.0)


@_prim("exp", lambda g, xs, out: (g * out,))
def _f_exp(a):
    return np.exp(a)


@_prim("log", lambda g, xs, out: (g / xs[0],))
def _f_log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a)


@_prim("sqrt", lambda g, xs, out: (g * 0.5 / out,))
def _f_sqrt(a):
    with np.errstate(invalid="ignore"):
        return np.sqrt(a)


@_prim("arccos", lambda g, xs, out: (-g / np.sqrt(1.0 - xs[0] ** 2),))
def _f_arccos(a):
    with np.errstate(invalid="ignore"):
        return np.arccos(a)


@_prim("clip", lambda g, xs, out, lo, hi: (g * ((xs[0] >= lo) & (xs[0] <= hi)),))
def _f_clip(a, lo, hi):
    return np.clip(a, lo, hi)


def _vjp_huber(g, xs, out, delta):
    a = xs[0]
    return (g * np.where(np.abs(a) <= delta, a, delta * np.sign(a)),)


@_prim("huber", _vjp_huber)
def _f_huber(a, delta):
    abs_a = np.abs(a)
    return np.where(abs_a <= delta, 0.5 * a * a, delta * (abs_a - 0.5 * delta))


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def _fixed_sum(a: np.ndarray, axis):
    # left-to-right accumulation along the reduced axis
    if axis is None:
        return np.asarray(np.cumsum(a.ravel())[-1] if a.size else 0.0)
    return np.cumsum(a, axis=axis).take(-1, axis=axis) if a.shape[axis] else a.sum(axis=axis)


@_prim("sum", lambda g, xs, out, axis: (_expand(g, xs[0].shape, axis),))
def _f_sum(a, axis):
    return _fixed_sum(a, axis)


def _vjp_mean(g, xs, out, axis):
    n = xs[0].size if axis is None else xs[0].shape[axis]
    return (_expand(g, xs[0].shape, axis) / n,)


@_prim("mean", _vjp_mean)
def _f_mean(a, axis):
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean", "non-empty reduction axis", a.shape)
    return _fixed_sum(a, axis) / n


def _vjp_l2n(g, xs, out):
    a = xs[0]
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    proj = np.sum(g * out, axis=-1, keepdims=True)
    return ((g - out * proj) / norm,)


@_prim("l2_normalize", _vjp_l2n)
def _f_l2n(a):
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norm < NORM_FLOOR):
        raise DegenerateNormError(f"cannot l2-normalize a vector with norm < {NORM_FLOOR}")
    return a / norm


def _vjp_softmax(g, xs, out, axis):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


@_prim("softmax", _vjp_softmax)
def _f_softmax(a, axis):
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def _masked_weights(a, axis, mask):
    m = np.max(np.where(mask, a, -np.inf), axis=axis, keepdims=True) if mask is not None else np.max(
        a, axis=axis, keepdims=True
    )
    e = np.exp(a - m)
    if mask is not None:
        e = e * mask
    return e, m


def _vjp_lse(g, xs, out, axis, mask):
    e, m = _masked_weights(xs[0], axis, mask)
    w = e / np.sum(e, axis=axis, keepdims=True)
    return (np.expand_dims(g, axis) * w,)


@_prim("logsumexp", _vjp_lse)
def _f_lse(a, axis, mask):
    if mask is not None and mask.shape != a.shape:
        raise ShapeError("logsumexp", f"mask of shape {a.shape}", mask.shape)
    e, m = _masked_weights(a, axis, mask)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(e, axis=axis))


def _vjp_concat(g, xs, out, axis):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


@_prim("concatenate", _vjp_concat)
def _f_concat(*arrays, axis):
    try:
        return np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concatenate", f"matching shapes off axis {axis}", [a.shape for a in arrays]) from None


def _vjp_take(g, xs, out, idx):
    grad = np.zeros_like(xs[0])
    np.add.at(grad, idx, g)
    return (grad,)


@_prim("take", _vjp_take)
def _f_take(a, idx):
    try:
        return np.array(a[idx], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError("take", f"index valid for shape {a.shape}", str(exc)) from None


def _vjp_reshape(g, xs, out, shape):
    return (g.reshape(xs[0].shape),)


@_prim("reshape", _vjp_reshape)
def _f_reshape(a, shape):
    try:
        return a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"size {a.size}", shape) from None


# ---------------------------------------------------------------------------
# application


def _apply(op: str, args: Sequence, **attrs):
    trace = None
    for a in args:
        if isinstance(a, Var):
            if trace is not None and a.trace is not trace:
                raise ValueError(f"{op}: operands from different traces")
            trace = a.trace
    values = [value_of(a) for a in args]
    label = op if trace is None else f"{op}#{len(trace.nodes)}"
    try:
        out = PRIMITIVES[op].forward(*values, **attrs)
    except ShapeError as err:
        raise ShapeError(label, err.expected, err.actual) from None
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(label)
    if trace is None:
        return out
    idx = tuple(a.index if isinstance(a, Var) else trace.const(a).index for a in args)
    return trace._record(op, idx, attrs, out)


def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def div(a, b):
    return _apply("div", (a, b))


def scale(a, c: float):
    """Multiply by a Python scalar."""
    return _apply("scale", (a,), c=float(c))


def shift(a, c: float):
    """Add a Python scalar."""
    return _apply("shift", (a,), c=float(c))


def matmul(a, b):
    return _apply("matmul", (a, b))


def dot(a, b):
    """Inner product of two vectors, accumulated left to right."""
    return _apply("dot", (a, b))


def transpose(a):
    return _apply("transpose", (a,))


def relu(a):
    return _apply("relu", (a,))


def exp(a):
    return _apply("exp", (a,))


def log(a):
    return _apply("log", (a,))


def sqrt(a):
    return _apply("sqrt", (a,))


def arccos(a):
    return _apply("arccos", (a,))


def clip(a, lo: float, hi: float):
    return _apply("clip", (a,), lo=float(lo), hi=float(hi))


def huber(a, delta: float = 1.0):
    return _apply("huber", (a,), delta=float(delta))


def sum(a, axis: int | None = None):  # noqa: A001
    return _apply("sum", (a,), axis=axis)


def mean(a, axis: int | None = None):
    return _apply("mean", (a,), axis=axis)


def l2_normalize(a):
    """Scale the last axis to unit Euclidean norm."""
    return _apply("l2_normalize", (a,))


def softmax(a, axis: int = -1):
    return _apply("softmax", (a,), axis=axis)


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None):
    """log(sum(exp(a))) along ``axis``, restricted to entries where ``mask`` is true."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return _apply("logsumexp", (a,), axis=axis, mask=mask)


def log_softmax(a, axis: int = -1):
    keep = list(value_of(a).shape)
    keep[axis] = 1
    return sub(a, reshape(logsumexp(a, axis=axis), keep))


def concatenate(arrays: Sequence, axis: int = 0):
    return _apply("concatenate", tuple(arrays), axis=axis)


def take(a, idx):
    """Gather with numpy indexing semantics (basic or fancy)."""
    return _apply("take", (a,), idx=idx)


def reshape(a, shape):
    return _apply("reshape", (a,), shape=tuple(shape))


def pick(a, cols):
    """Row-wise gather: ``a[i, cols[i]]`` for a 2-d ``a``."""
    cols = np.asarray(cols, dtype=np.int64)
    return take(a, (np.arange(len(cols)), cols))


# ---------------------------------------------------------------------------
# trace-level operations


def _replay(trace: Trace, overrides: Mapping[str, Any]) -> list[np.ndarray]:
    unknown = set(overrides) - set(trace._names)
    if unknown:
        raise KeyError(f"no leaf named {sorted(unknown)}")
    values: list[np.ndarray] = []
    for i, node in enumerate(trace.nodes):
        if node.kind != "op":
            if node.name is not None and node.name in overrides:
                v = np.asarray(overrides[node.name], dtype=np.float64)
                if v.shape != node.value.shape:
                    raise ShapeError(f"{node.name}#{i}", node.value.shape, v.shape)
                values.append(v)
            else:
                values.append(node.value)
            continue
        xs = [values[j] for j in node.inputs]
        try:
            out = np.asarray(PRIMITIVES[node.op].forward(*xs, **node.attrs), dtype=np.float64)
        except ShapeError as err:
            raise ShapeError(f"{node.op}#{i}", err.expected, err.actual) from None
        if out.shape != node.value.shape:
            raise ShapeError(f"{node.op}#{i}", node.value.shape, out.shape)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{node.op}#{i}")
        values.append(out)
    return values


def evaluate(trace: Trace, inputs: Mapping[str, Any] | None = None, outputs: Sequence | None = None) -> dict:
    """Replay ``trace`` with named leaves rebound from ``inputs``.

    Returns ``{name: array}`` for the trace's registered outputs, or for
    ``outputs`` (names or :class:`Var` handles) when given. The trace itself
    is not modified.
    """
    values = _replay(trace, inputs or {})
    if outputs is None:
        return {name: values[i] for name, i in trace.outputs.items()}
    result = {}
    for o in outputs:
        if isinstance(o, Var):
            result[o.index] = values[o.index]
        else:
            result[o] = values[trace.outputs[o]]
    return result


def gradient(trace: Trace, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every param leaf, keyed by name.

    Leaves the loss does not depend on get an all-zero gradient.
    """
    if loss.trace is not trace:
        raise ValueError("loss does not belong to this trace")
    if loss.value.shape != ():
        raise ShapeError(f"gradient at node #{loss.index}", "scalar loss", loss.value.shape)
    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones(())
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = trace.nodes[i]
        if g is None or node.kind != "op":
            continue
        xs = [trace.nodes[j].value for j in node.inputs]
        contribs = PRIMITIVES[node.op].vjp(g, xs, node.value, **node.attrs)
        for j, c in zip(node.inputs, contribs):
            if trace.nodes[j].kind == "const" or trace.nodes[j].kind == "input":
                continue
            grads[j] = c if grads[j] is None else grads[j] + c
    out = {}
    for name, i in trace.params.items():
        g = grads[i] if i < len(grads) else None
        out[name] = np.zeros_like(trace.nodes[i].value) if g is None else np.asarray(g, dtype=np.float64)
    return out


def check_gradient(trace: Trace, loss: Var, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    analytic = gradient(trace, loss)
    base = {name: trace.nodes[i].value for name, i in trace.params.items()}
    worst = 0.0
    for name, value in base.items():
        flat = value.ravel()
        for k in range(flat.size):
            bumped = flat.copy()
            bumped[k] = flat[k] + eps
            hi = evaluate(trace, {name: bumped.reshape(value.shape)}, [loss])[loss.index]
            bumped[k] = flat[k] - eps
            lo = evaluate(trace, {name: bumped.reshape(value.shape)}, [loss])[loss.index]
            numeric = (float(hi) - float(lo)) / (2 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"finite difference for {name}[{k}]")
            err = abs(analytic[name].ravel()[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    method: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("sgd", "sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def optimizer_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Apply one update. Parameters without a gradient entry are left alone.

    Returns new parameter and state objects; the inputs are not mutated.
    """
    t = state.step + 1
    m = dict(state.m)
    v = dict(state.v)
    new = dict(params)
    for name, g in grads.items():
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"optimizer_step[{name}]", p.shape, g.shape)
        if state.method == "sgd":
            new[name] = p - state.lr * g
        elif state.method == "sgd-momentum":
            buf = state.momentum * m.get(name, np.zeros_like(p)) + g
            m[name] = buf
            new[name] = p - state.lr * buf
        else:
            m[name] = state.beta1 * m.get(name, np.zeros_like(p)) + (1 - state.beta1) * g
            v[name] = state.beta2 * v.get(name, np.zeros_like(p)) + (1 - state.beta2) * g * g
            m_hat = m[name] / (1 - state.beta1**t)
            v_hat = v[name] / (1 - state.beta2**t)
            new[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, step=t, m=m, v=v)
