"""Dense tensors with a flat reverse-mode gradient tape.

Every primitive computes its value with numpy and, when any operand lives
on a tape, appends one node holding the parent ids and a vector-Jacobian
closure.  ``Tape.backward`` walks the node list in reverse, which is a
reverse topological order because nodes are only ever appended after their
parents.

Broadcasting follows numpy for the elementwise primitives (``add``, ``sub``,
``mul``, ``div``); their adjoints are summed back to the operand shape.
``matmul`` follows ``numpy.matmul`` including batch broadcasting and 1-D
promotion.  All other primitives document their own shape rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "Tape",
    "GradCheckReport",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "tanh",
    "exp",
    "sigmoid",
    "softplus",
    "silu",
    "clip",
    "sum",
    "mean",
    "broadcast_to",
    "reshape",
    "swapaxes",
    "diag_embed",
    "row_scale",
    "concatenate",
    "stack",
    "take",
    "apply_primitive",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced a NaN or infinite value."""


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's rule."""


class Tensor:
    """A numpy array plus an optional handle into a :class:`Tape`."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


class Tape:
    """Ordered record of primitive applications.

    A tape belongs to a single thread of execution; concurrent runs each
    create their own.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value, dtype=None) -> Tensor:
        """Register a leaf (a trainable parameter or an input to differentiate)."""
        arr = np.array(value, dtype=dtype or np.float64)
        self.nodes.append(_Node((), None, arr.shape))
        return Tensor(arr, self, len(self.nodes) - 1)

    def _record(self, value: np.ndarray, parents: tuple[int, ...], vjp) -> Tensor:
        self.nodes.append(_Node(parents, vjp, value.shape))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, loss: Tensor, upstream: float = 1.0) -> dict[int, np.ndarray]:
        """Gradients of ``loss`` with respect to every leaf on this tape.

        Leaves the loss does not depend on get exact zeros.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self or loss.node is None:
            raise ValueError("loss is not recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: list = [None] * len(self.nodes)
        owned = bytearray(len(self.nodes))  # 1 where grads[i] is a private buffer
        grads[loss.node] = np.full(loss.shape, upstream, dtype=loss.dtype)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent < 0 or pg is None:
                    continue
                cur = grads[parent]
                if isinstance(pg, _SliceGrad):
                    if not owned[parent]:
                        cur = np.zeros(self.nodes[parent].shape, dtype=pg.g.dtype) if cur is None else cur.copy()
                        grads[parent], owned[parent] = cur, 1
                    cur[pg.index] += pg.g
                elif cur is None:
                    grads[parent] = pg
                elif owned[parent]:
                    cur += pg
                else:
                    grads[parent], owned[parent] = cur + pg, 1
        out = {}
        for i, node in enumerate(self.nodes):
            if node.vjp is None:
                g = grads[i]
                out[i] = np.zeros(node.shape) if g is None else np.asarray(g)
        return out


class _SliceGrad:
    """Adjoint of a basic-indexing slice, added in place at ``index``."""

    __slots__ = ("index", "g")

    def __init__(self, index, g):
        self.index, self.g = index, g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(value: np.ndarray, operands: Sequence[Tensor], vjp) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError("non-finite values produced")
    tape = None
    for t in operands:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    parents = tuple(t.node if t.tape is tape else -1 for t in operands)
    return tape._record(value, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return op(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(_binary(np.add, a, b), (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(_binary(np.subtract, a, b), (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    need_a, need_b = a.tape is not None, b.tape is not None
    return _emit(
        _binary(np.multiply, a, b),
        (a, b),
        lambda g: (
            _unbroadcast(g * bv, av.shape) if need_a else None,
            _unbroadcast(g * av, bv.shape) if need_b else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _binary(np.divide, a, b)
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``numpy.matmul`` semantics: batch dims broadcast, 1-D operands promoted."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-D")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = av @ bv
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}") from exc

    need_a, need_b = a.tape is not None, b.tape is not None

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if bv.ndim == 2 and av.ndim >= 2:
            # weight on the right: fold batch dims into one contraction
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if need_b else None
            return (g @ bv.T if need_a else None), gb
        if av.ndim == 2 and bv.ndim > 2:
            ga = None
            if need_a:
                axes = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
                ga = np.tensordot(g, bv, axes=(axes, axes))
            gb = _unbroadcast(av.T @ g, bv.shape) if need_b else None
            return ga, gb
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if av.ndim == 1:
            ga = _unbroadcast(ga, (1,) * (ga.ndim - 2) + (1, av.shape[0])).reshape(av.shape)
        else:
            ga = _unbroadcast(ga, av.shape)
        if bv.ndim == 1:
            gb = _unbroadcast(gb, (1,) * (gb.ndim - 2) + (bv.shape[0], 1)).reshape(bv.shape)
        else:
            gb = _unbroadcast(gb, bv.shape)
        return ga, gb

    return _emit(np.asarray(out), (a, b), vjp)


def linear(x, w) -> Tensor:
    """``x @ w.T`` for x (..., k) and a 2-D weight w (n, k)."""
    x, w = as_tensor(x), as_tensor(w)
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.ndim < 1 or xv.shape[-1] != wv.shape[1]:
        raise ShapeError(f"linear shape mismatch {xv.shape} with weight {wv.shape}")
    need_w = w.tape is not None

    def vjp(g):
        gw = None
        if need_w:
            gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return g @ wv, gw

    return _emit(xv @ wv.T, (x, w), vjp)


# elementwise unary --------------------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _emit(out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """``log1p(exp(-|x|)) + max(x, 0)``."""
    a = as_tensor(a)
    x = a.value
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    return _emit(out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    s = _sigmoid(x)
    return _emit(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Elementwise clamp to ``[lo, hi]``; the gradient is zero where clamped."""
    a = as_tensor(a)
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _emit(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# reductions and layout ----------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.value.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    return _emit(out, (a,), lambda g: (_unbroadcast(g, src),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _emit(out, (a,), lambda g: (g.reshape(src),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _emit(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def diag_embed(v) -> Tensor:
    """(..., n) -> (..., n, n) with ``v`` on the diagonal."""
    v = as_tensor(v)
    n = v.shape[-1]
    out = np.zeros(v.shape + (n,), dtype=v.dtype)
    idx = np.arange(n)
    out[..., idx, idx] = v.value
    return _emit(out, (v,), lambda g: (g[..., idx, idx].copy(),))


def row_scale(u, m) -> Tensor:
    """Scale row ``i`` of ``m`` (..., n, k) by ``u[..., i]`` (..., n)."""
    u, m = as_tensor(u), as_tensor(m)
    if m.ndim < 2 or u.shape[-1] != m.shape[-2]:
        raise ShapeError(f"row_scale needs u (..., n) and m (..., n, k), got {u.shape}, {m.shape}")
    uv, mv = u.value, m.value
    out = uv[..., :, None] * mv
    try:
        np.broadcast_shapes(uv.shape[:-1], mv.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"row_scale batch dims {u.shape} vs {m.shape}") from exc
    return _emit(
        out,
        (u, m),
        lambda g: (
            _unbroadcast((g * mv).sum(axis=-1), uv.shape),
            _unbroadcast(g * uv[..., :, None], mv.shape),
        ),
    )


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, ts, lambda g: np.split(g, bounds, axis=axis))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    n = len(ts)
    return _emit(out, ts, lambda g: [np.take(g, i, axis=axis) for i in range(n)])


def take(a, index) -> Tensor:
    """Basic (slice / integer / Ellipsis / None) indexing."""
    a = as_tensor(a)
    out = a.value[index]
    if not isinstance(out, np.ndarray) or np.shares_memory(out, a.value):
        out = np.array(out)
    return _emit(out, (a,), lambda g: (_SliceGrad(index, g),))


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "linear": linear,
    "tanh": tanh,
    "exp": exp,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "silu": silu,
    "clip": clip,
    "sum": sum,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "swapaxes": swapaxes,
    "diag_embed": diag_embed,
    "row_scale": row_scale,
    "concatenate": lambda *ts, axis=0: concatenate(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "slice": take,
}


def apply_primitive(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("softplus", x)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **kwargs)


# gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between tape and finite differences."""

    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    @property
    def ok(self) -> bool:
        return not self.failures


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` maps a dict of parameter tensors to a scalar tensor.  The error for
    one parameter array is ``max|analytic - numeric|`` divided by the larger
    of the two max-norms (never below ``floor``).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.variable(v) for k, v in params.items()}
    loss = f(leaves)
    grads = tape.backward(loss)

    def value_at(name, flat_idx, delta):
        p = dict(params)
        arr = params[name].copy()
        arr.flat[flat_idx] += delta
        p[name] = arr
        return float(f({k: Tensor(v) for k, v in p.items()}).value)

    report = GradCheckReport(tolerance=tolerance)
    for name, arr in params.items():
        numeric = np.empty(arr.size)
        for i in range(arr.size):
            numeric[i] = (value_at(name, i, step) - value_at(name, i, -step)) / (2 * step)
        report.errors[name] = _rel_err(grads[leaves[name].node], numeric, floor)
    return report
