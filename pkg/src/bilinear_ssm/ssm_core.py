"""Machinery shared by every variant: dimensions, selectivity, decay and the
Mamba-style block wrapped around the SSM branch.

Sequences inside the model are time-major, ``(L, batch, features)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Variant",
    "Routing",
    "ModelDims",
    "Selectivity",
    "BlockState",
    "param_shapes",
    "selectivity",
    "discretize",
    "causal_conv",
    "block_forward",
    "block_step",
    "init_block_state",
    "count_params",
]


class Variant(str, Enum):
    STANDARD = "standard"
    COUPLED = "coupled"
    SEQ_BIM = "seq-bim"
    GM = "gm"
    P_BIM = "p-bim"

    @property
    def coupled(self) -> bool:
        return self is not Variant.STANDARD

    @property
    def bilinear(self) -> bool:
        return self in (Variant.SEQ_BIM, Variant.GM, Variant.P_BIM)

    @property
    def label(self) -> str:
        return {
            "standard": "Standard",
            "coupled": "Coupled",
            "seq-bim": "seq-BIM",
            "gm": "GM",
            "p-bim": "p-BIM",
        }[self.value]


class Routing(str, Enum):
    FULL = "full"
    XPROJ_ONLY = "xproj-only"
    BCOUP_ONLY = "bcoup-only"


@dataclass(frozen=True)
class ModelDims:
    """Sizes of one block.

    ``dt_rank="auto"`` gives the usual low-rank Δt head of width
    ``ceil(d_model / 16)``; ``dt_rank=0`` maps straight from the SSM input to
    Δt with no bottleneck.
    """

    d_model: int
    d_state: int = 8
    d_inner: int | None = None
    context: int = 50
    dt_rank: int | str = "auto"
    conv_width: int = 4

    def __post_init__(self):
        if self.d_model < 1:
            raise ValueError("d_model must be >= 1")
        if self.d_state < 1:
            raise ValueError("d_state must be >= 1")
        if self.context < 2:
            raise ValueError("context length must be >= 2")
        if self.d_inner is not None and self.d_inner < 1:
            raise ValueError("d_inner must be >= 1")
        if not (self.dt_rank == "auto" or (isinstance(self.dt_rank, int) and self.dt_rank >= 0)):
            raise ValueError("dt_rank must be 'auto' or a non-negative int")
        if self.conv_width < 1:
            raise ValueError("conv_width must be >= 1")

    @property
    def d_i(self) -> int:
        return 4 * self.d_model if self.d_inner is None else self.d_inner

    @property
    def d_s(self) -> int:
        return self.d_state

    @property
    def rank(self) -> int:
        return math.ceil(self.d_model / 16) if self.dt_rank == "auto" else int(self.dt_rank)

    @property
    def scale(self) -> float:
        """Bilinear scale ``1/sqrt(d_i)``."""
        return 1.0 / math.sqrt(self.d_i)

    def dt_width(self, variant: Variant) -> int:
        return self.d_s if Variant(variant).coupled else self.d_i

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(variant, dims: ModelDims, mode: str = "full-block") -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable array of ``variant``."""
    variant = Variant(variant)
    di, ds, r = dims.d_i, dims.d_s, dims.rank
    ndt = dims.dt_width(variant)
    shapes: dict[str, tuple[int, ...]] = {}
    if mode == "full-block":
        shapes["in_proj"] = (dims.d_model, 2 * di)
        shapes["conv_weight"] = (di, dims.conv_width)
        shapes["conv_bias"] = (di,)
    elif mode != "ssm-only":
        raise ValueError(f"unknown mode {mode!r}")
    if r:
        shapes["x_proj"] = (di, r + 2 * ds)
        shapes["dt_proj"] = (r, ndt)
    else:
        shapes["x_proj"] = (di, ndt + 2 * ds)
    shapes["dt_bias"] = (ndt,)
    shapes["A_log"] = (ds,) if variant.coupled else (di, ds)
    shapes["D"] = (di,)
    if variant.coupled:
        shapes["B_coup"] = (ds, di)
        shapes["C_coup"] = (di, ds)
    if variant.bilinear:
        shapes["W_h"] = (di, ds)
        shapes["W_x"] = (di, di)
        shapes["W_out"] = (di, di)
    if mode == "full-block":
        shapes["out_proj"] = (di, dims.d_model)
    return shapes


def count_params(variant, dims: ModelDims, mode: str = "full-block") -> int:
    """Number of scalars in the learnable arrays of ``variant``.

    ``ssm-only`` covers decay, skip, selectivity, coupling and modulation
    weights; ``full-block`` adds the input/output projections and the conv.
    """
    return int(sum(math.prod(s) for s in param_shapes(variant, dims, mode).values()))


class Selectivity(NamedTuple):
    dt: Tensor
    B: Tensor
    C: Tensor


def selectivity(u, params: dict, dims: ModelDims) -> Selectivity:
    """Input-dependent ``(Δt, B_t, C_t)`` from the SSM-branch input ``u`` (..., d_i).

    The Δt width follows ``params["dt_bias"]``: d_i for Standard, d_s for the
    coupled variants.
    """
    u = ad.as_tensor(u)
    ds, r = dims.d_s, dims.rank
    proj = ad.matmul(u, params["x_proj"])
    if r:
        dt_pre = ad.matmul(proj[..., :r], params["dt_proj"])
    else:
        ndt = ad.as_tensor(params["dt_bias"]).shape[-1]
        dt_pre, r = proj[..., :ndt], ndt
    dt = ad.softplus(dt_pre + params["dt_bias"])
    return Selectivity(dt, proj[..., r : r + ds], proj[..., r + ds : r + 2 * ds])


def decay_rate(A_log) -> Tensor:
    """``A = -exp(A_log)``, strictly negative."""
    return ad.neg(ad.exp(A_log))


def discretize(A_log, dt) -> Tensor:
    """``dA = exp(A * Δt)`` with ``A = -exp(A_log)``.

    Per-channel (Standard): ``A_log`` (d_i, d_s), ``dt`` (..., d_i) -> (..., d_i, d_s).
    Shared (coupled): ``A_log`` (d_s,), ``dt`` (..., d_s) -> (..., d_s).
    """
    A_log, dt = ad.as_tensor(A_log), ad.as_tensor(dt)
    A = decay_rate(A_log)
    if A_log.ndim == 2:
        dt = ad.reshape(dt, dt.shape + (1,))
    return ad.exp(A * dt)


def causal_conv(x, weight, bias) -> Tensor:
    """Depthwise causal convolution over the leading time axis.

    ``out[t] = bias + sum_k weight[:, k] * x[t - (w-1) + k]`` with zeros before t=0.
    """
    x, weight = ad.as_tensor(x), ad.as_tensor(weight)
    w = weight.shape[-1]
    L = x.shape[0]
    if w > 1:
        pad = np.zeros((w - 1,) + x.shape[1:], dtype=x.dtype)
        x = ad.concatenate([pad, x], axis=0)
    out = None
    for k in range(w):
        term = x[k : k + L] * weight[:, k]
        out = term if out is None else out + term
    return out + bias


SSMFn = Callable[[Tensor], Tensor]


def _time_major(x) -> tuple[Tensor, bool, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return ad.reshape(x, (x.shape[0], 1, x.shape[1])), True, False
    if x.ndim == 3:
        return ad.swapaxes(x, 0, 1), False, True
    raise ad.ShapeError(f"expected (L, d_model) or (batch, L, d_model), got {x.shape}")


def block_forward(x_seq, params: dict, dims: ModelDims, ssm: SSMFn) -> Tensor:
    """Run one block over a whole sequence.

    ``x_seq`` is (L, d_model) or (batch, L, d_model); the output has the same
    shape.  ``ssm`` maps the time-major SSM-branch input (L, batch, d_i) to
    the branch output of the same shape.
    """
    x, single, batch_first = _time_major(x_seq)
    if x.shape[-1] != dims.d_model:
        raise ad.ShapeError(f"input has {x.shape[-1]} channels, dims say {dims.d_model}")
    di = dims.d_i
    xz = ad.matmul(x, params["in_proj"])
    u = ad.silu(causal_conv(xz[..., :di], params["conv_weight"], params["conv_bias"]))
    y = ssm(u)
    out = ad.matmul(y * ad.silu(xz[..., di:]), params["out_proj"])
    if single:
        return ad.reshape(out, (out.shape[0], out.shape[2]))
    return ad.swapaxes(out, 0, 1) if batch_first else out


class BlockState(NamedTuple):
    conv: np.ndarray | Tensor  # last (w-1) conv inputs, (w-1, batch, d_i)
    h: np.ndarray | Tensor


def init_block_state(variant, dims: ModelDims, batch: int, dtype=np.float64) -> BlockState:
    variant = Variant(variant)
    hshape = (batch, dims.d_i, dims.d_s) if variant is Variant.STANDARD else (batch, dims.d_s)
    return BlockState(
        np.zeros((dims.conv_width - 1, batch, dims.d_i), dtype=dtype), np.zeros(hshape, dtype=dtype)
    )


def block_step(x_t, params: dict, dims: ModelDims, step, state: BlockState):
    """Advance the block by one step.

    ``x_t`` is (batch, d_model); ``step(h_prev, u_t) -> (h_t, y_t)`` is the
    variant recurrence.  Returns ``(out_t, new_state)``.
    """
    x_t = ad.as_tensor(x_t)
    di = dims.d_i
    xz = ad.matmul(x_t, params["in_proj"])
    xs = xz[..., :di]
    window = ad.concatenate([state.conv, ad.reshape(xs, (1,) + xs.shape)], axis=0)
    weight = ad.as_tensor(params["conv_weight"])
    acc = params["conv_bias"]
    for k in range(dims.conv_width):
        acc = window[k] * weight[:, k] + acc
    u = ad.silu(acc)
    h, y = step(state.h, u)
    out = ad.matmul(y * ad.silu(xz[..., di:]), params["out_proj"])
    return out, BlockState(window[1:], h)
