"""Associative scans for linear recurrences ``h_t = G_t h_{t-1} + b_t``.

Elements are ``(gate, offset)`` pairs stacked along a leading time axis.
Two gate kinds are supported:

* diagonal: ``gate.shape == offset.shape``, the gate acts elementwise;
* matrix: ``gate.shape == offset.shape + (n,)`` with ``n == offset.shape[-1]``,
  the gate acts by matrix-vector product on the last axis.

All functions accept :class:`~bilinear_ssm.autodiff.Tensor` or plain arrays
and are built from tape primitives, so gradients flow through them.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ScanElement",
    "gate_kind",
    "identity_element",
    "combine",
    "apply_element",
    "sequential_scan",
    "parallel_scan",
]

DIAGONAL = "diagonal"
MATRIX = "matrix"


class ScanElement(NamedTuple):
    gate: Tensor
    offset: Tensor


def _element(e) -> ScanElement:
    return ScanElement(ad.as_tensor(e[0]), ad.as_tensor(e[1]))


def gate_kind(e: ScanElement) -> str:
    g, b = e
    if g.shape == b.shape:
        return DIAGONAL
    if b.ndim >= 1 and g.shape == b.shape + (b.shape[-1],):
        return MATRIX
    raise ad.ShapeError(f"gate {g.shape} does not fit offset {b.shape}")


def identity_element(offset_shape, kind: str = DIAGONAL, dtype=np.float64) -> ScanElement:
    offset_shape = tuple(offset_shape)
    zero = np.zeros(offset_shape, dtype=dtype)
    if kind == DIAGONAL:
        gate = np.ones(offset_shape, dtype=dtype)
    elif kind == MATRIX:
        n = offset_shape[-1]
        gate = np.broadcast_to(np.eye(n, dtype=dtype), offset_shape + (n,)).copy()
    else:
        raise ValueError(f"unknown gate kind {kind!r}")
    return ScanElement(Tensor(gate), Tensor(zero))


def _matvec(m: Tensor, v: Tensor) -> Tensor:
    return ad.matmul(m, ad.reshape(v, v.shape + (1,))).reshape(v.shape)


def combine(e2, e1) -> ScanElement:
    """``e2 ∘ e1``: apply ``e1`` first, then ``e2``.

    Diagonal: ``(g2*g1, g2*b1 + b2)``; matrix: ``(G2 @ G1, G2 @ b1 + b2)``.
    """
    e2, e1 = _element(e2), _element(e1)
    kind = gate_kind(e2)
    if gate_kind(e1) != kind or e1.offset.shape != e2.offset.shape:
        raise ad.ShapeError(
            f"cannot combine {kind} element {e2.gate.shape} with {gate_kind(e1)} {e1.gate.shape}"
        )
    if kind == DIAGONAL:
        return ScanElement(e2.gate * e1.gate, e2.gate * e1.offset + e2.offset)
    return ScanElement(ad.matmul(e2.gate, e1.gate), _matvec(e2.gate, e1.offset) + e2.offset)


def apply_element(e, h0) -> Tensor:
    """State obtained by applying element ``e`` to ``h0`` (broadcast over time)."""
    e = _element(e)
    h0 = ad.as_tensor(h0)
    if gate_kind(e) == DIAGONAL:
        return e.gate * h0 + e.offset
    h = ad.broadcast_to(h0, e.offset.shape)
    return _matvec(e.gate, h) + e.offset


def _check_sequence(e: ScanElement, h0) -> tuple[str, Tensor]:
    kind = gate_kind(e)
    if e.offset.ndim < 2 or e.offset.shape[0] < 1:
        raise ad.ShapeError("elements need a non-empty leading time axis")
    h0 = ad.as_tensor(np.zeros(e.offset.shape[1:]) if h0 is None else h0)
    try:
        np.broadcast_shapes(h0.shape, e.offset.shape[1:])
    except ValueError as exc:
        raise ad.ShapeError(f"h0 {h0.shape} does not match state {e.offset.shape[1:]}") from exc
    return kind, h0


def sequential_scan(elements, h0=None) -> Tensor:
    """Left-to-right recurrence; the reference the parallel scan is checked against.

    Returns states stacked on the time axis.
    """
    e = _element(elements)
    kind, h = _check_sequence(e, h0)
    states = []
    for t in range(e.offset.shape[0]):
        g, b = e.gate[t], e.offset[t]
        h = g * h + b if kind == DIAGONAL else _matvec(g, ad.broadcast_to(h, b.shape)) + b
        states.append(h)
    return ad.stack(states, axis=0)


def _pad_pow2(e: ScanElement, kind: str) -> tuple[ScanElement, int]:
    n = e.offset.shape[0]
    size = 1 << max(n - 1, 0).bit_length()
    if size == n:
        return e, n
    ident = identity_element((size - n,) + e.offset.shape[1:], kind, e.offset.dtype)
    return (
        ScanElement(
            ad.concatenate([e.gate, ident.gate], axis=0),
            ad.concatenate([e.offset, ident.offset], axis=0),
        ),
        n,
    )


def _interleave(even: Tensor, odd: Tensor) -> Tensor:
    s = ad.stack([even, odd], axis=1)
    return s.reshape((2 * even.shape[0],) + even.shape[1:])


def _blelloch(e: ScanElement) -> ScanElement:
    # up-sweep pairs, recurse on the reduced half, down-sweep fills the evens
    n = e.offset.shape[0]
    if n == 1:
        return e
    left = ScanElement(e.gate[0::2], e.offset[0::2])
    right = ScanElement(e.gate[1::2], e.offset[1::2])
    odd = _blelloch(combine(right, left))
    if n == 2:
        return ScanElement(_interleave(left.gate, odd.gate), _interleave(left.offset, odd.offset))
    tail = combine(
        ScanElement(left.gate[1:], left.offset[1:]),
        ScanElement(odd.gate[:-1], odd.offset[:-1]),
    )
    even_g = ad.concatenate([left.gate[0:1], tail.gate], axis=0)
    even_b = ad.concatenate([left.offset[0:1], tail.offset], axis=0)
    return ScanElement(_interleave(even_g, odd.gate), _interleave(even_b, odd.offset))


def _doubling(e: ScanElement, kind: str) -> ScanElement:
    # Hillis-Steele: same prefixes, different combination tree
    n = e.offset.shape[0]
    shift = 1
    while shift < n:
        ident = identity_element((shift,) + e.offset.shape[1:], kind, e.offset.dtype)
        prev = ScanElement(
            ad.concatenate([ident.gate, e.gate[: n - shift]], axis=0),
            ad.concatenate([ident.offset, e.offset[: n - shift]], axis=0),
        )
        e = combine(e, prev)
        shift *= 2
    return e


def parallel_scan(elements, h0=None, layout: str = "blelloch") -> Tensor:
    """All prefix states via a log-depth tree of :func:`combine` calls.

    ``layout="blelloch"`` pads to a power of two with identity elements and
    runs the two-pass up/down sweep; ``layout="doubling"`` uses the
    Hillis-Steele tree instead.  Both agree with :func:`sequential_scan` up
    to rounding.
    """
    e = _element(elements)
    kind, h0 = _check_sequence(e, h0)
    if layout == "blelloch":
        padded, n = _pad_pow2(e, kind)
        prefix = _blelloch(padded)
        if prefix.offset.shape[0] != n:
            prefix = ScanElement(prefix.gate[:n], prefix.offset[:n])
    elif layout == "doubling":
        prefix = _doubling(e, kind)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return apply_element(prefix, h0)
