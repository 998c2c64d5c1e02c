"""The five SSM recurrences and the seq-BIM pathway routings.

Step functions advance one timestep and accept any leading batch shape:
``u_t`` is (..., d_i), the state is (..., d_i, d_s) for Standard and
(..., d_s) for the coupled variants.  ``ssm_sequence`` runs a whole
time-major sequence, through the parallel scan for the four variants that
are linear in ``h`` and through an explicit loop for seq-BIM.

Parameters are plain dicts of arrays or tape tensors keyed as in
:func:`bilinear_ssm.ssm_core.param_shapes`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from . import autodiff as ad
from . import scan as scan_mod
from .autodiff import Tensor
from .ssm_core import ModelDims, Routing, Variant, block_forward, decay_rate, discretize, selectivity

__all__ = [
    "Variant",
    "Routing",
    "standard_step",
    "coupled_step",
    "seqbim_modulate",
    "seqbim_step",
    "gm_modulation",
    "gm_gate",
    "gm_step",
    "gm_linearization_identity",
    "pbim_gate",
    "pbim_step",
    "step_fn",
    "ssm_sequence",
    "check_routing",
    "ModelSpec",
]


def check_routing(variant, routing) -> tuple[Variant, Routing]:
    variant, routing = Variant(variant), Routing(routing)
    if routing is not Routing.FULL and variant is not Variant.SEQ_BIM:
        raise ValueError(
            f"routing {routing.value!r} only applies to seq-bim, not {variant.value!r}"
        )
    return variant, routing


def _vec(h: Tensor) -> Tensor:
    return ad.reshape(h, h.shape + (1,))


def _apply(W, x) -> Tensor:
    """``W @ x`` for a stack of column vectors stored as rows: (..., k) -> (..., n)."""
    return ad.linear(x, W)


# Standard ---------------------------------------------------------------


def standard_step(h_prev, u_t, params: dict, dims: ModelDims):
    """Per-channel diagonal recurrence.

    ``h[d, n] = dA[d, n] h_prev[d, n] + Δt[d] B[n] u[d]``;
    ``y[d] = sum_n C[n] h[d, n] + D[d] u[d]``.
    """
    u_t = ad.as_tensor(u_t)
    sel = selectivity(u_t, params, dims)
    dA = discretize(params["A_log"], sel.dt)
    drive = ad.reshape(sel.dt * u_t, u_t.shape + (1,)) * ad.reshape(sel.B, sel.B.shape[:-1] + (1, dims.d_s))
    h = dA * h_prev + drive
    C = ad.reshape(sel.C, sel.C.shape[:-1] + (1, dims.d_s))
    y = ad.sum(h * C, axis=-1) + ad.as_tensor(params["D"]) * u_t
    return h, y


# Coupled ----------------------------------------------------------------


def _coupled_update(h_prev, dA, sel, x_state):
    return dA * h_prev + sel.dt * sel.B * x_state


def _coupled_readout(h, sel, params, skip_in):
    return _apply(params["C_coup"], sel.C * h) + ad.as_tensor(params["D"]) * skip_in


def coupled_step(h_prev, u_t, params: dict, dims: ModelDims):
    """Shared state with dense input/output coupling.

    ``x_state = B_coup u``; ``h = dA ⊙ h_prev + Δt ⊙ B ⊙ x_state``;
    ``y = C_coup (C ⊙ h) + D ⊙ u``.
    """
    u_t = ad.as_tensor(u_t)
    sel = selectivity(u_t, params, dims)
    dA = discretize(params["A_log"], sel.dt)
    h = _coupled_update(h_prev, dA, sel, _apply(params["B_coup"], u_t))
    return h, _coupled_readout(h, sel, params, u_t)


# seq-BIM ----------------------------------------------------------------


def seqbim_modulate(h_prev, u_t, params: dict, dims: ModelDims, return_proj: bool = False):
    """``x_mod = u + W_out((W_x u) ⊙ tanh(s W_h h_prev))``."""
    u_t = ad.as_tensor(u_t)
    h_proj = ad.tanh(_apply(params["W_h"], h_prev) * dims.scale)
    x_mod = u_t + _apply(params["W_out"], _apply(params["W_x"], u_t) * h_proj)
    return (x_mod, h_proj) if return_proj else x_mod


def seqbim_step(h_prev, u_t, params: dict, dims: ModelDims, routing=Routing.FULL):
    """Coupled step driven by the modulated input.

    ``routing`` picks which downstream pathway sees ``x_mod``: ``full`` feeds
    it to the selectivity projection, to ``B_coup`` and to the skip;
    ``xproj-only`` to the selectivity projection alone; ``bcoup-only`` to
    ``B_coup`` alone.  The other pathways get the unmodulated input.
    """
    routing = Routing(routing)
    u_t = ad.as_tensor(u_t)
    x_mod = seqbim_modulate(h_prev, u_t, params, dims)
    sel_in = u_t if routing is Routing.BCOUP_ONLY else x_mod
    state_in = u_t if routing is Routing.XPROJ_ONLY else x_mod
    skip_in = x_mod if routing is Routing.FULL else u_t
    sel = selectivity(sel_in, params, dims)
    dA = discretize(params["A_log"], sel.dt)
    h = _coupled_update(h_prev, dA, sel, _apply(params["B_coup"], state_in))
    return h, _coupled_readout(h, sel, params, skip_in)


# GM ---------------------------------------------------------------------


def gm_modulation(u_t, params: dict) -> Tensor:
    """``g[n] = sum_d B_coup[n, d] [W_out((W_x u) ⊙ W_h[:, n])]_d``, shape (..., d_s).

    Evaluated as ``(W_x u) @ K`` with ``K[e, n] = (B_coup W_out)[n, e] W_h[e, n]``,
    which never materialises the per-step (d_i, d_s) product.
    """
    wx = _apply(params["W_x"], u_t)
    K = ad.swapaxes(ad.matmul(params["B_coup"], params["W_out"]), 0, 1) * params["W_h"]
    return ad.matmul(wx, K)


# sigmoid of anything in this range is representable strictly inside (0, 1)
_GATE_LOGIT_RANGE = (-700.0, 36.0)


def _gm_gate(sel, u_t, params, dims) -> Tensor:
    A = decay_rate(params["A_log"])
    g = gm_modulation(u_t, params)
    return ad.sigmoid(ad.clip(A * sel.dt + sel.dt * sel.B * g * dims.scale, *_GATE_LOGIT_RANGE))


def gm_gate(u_t, params: dict, dims: ModelDims) -> Tensor:
    """``σ(A Δt + Δt B g s)``, every component strictly inside (0, 1).

    Δt and B come from the unmodulated input.  The logit is clamped to
    [-700, 36] first so the float64 sigmoid never rounds to 0 or 1; inside
    that range it is untouched.
    """
    return _gm_gate(selectivity(u_t, params, dims), u_t, params, dims)


def gm_step(h_prev, u_t, params: dict, dims: ModelDims):
    u_t = ad.as_tensor(u_t)
    sel = selectivity(u_t, params, dims)
    gate = _gm_gate(sel, u_t, params, dims)
    h = _coupled_update(h_prev, gate, sel, _apply(params["B_coup"], u_t))
    return h, _coupled_readout(h, sel, params, u_t)


def _bilinear_map(u_t, params, dims) -> np.ndarray:
    """``M(u) = s W_out diag(W_x u) W_h`` as plain arrays, (..., d_i, d_s)."""
    W_x, W_h, W_out = (np.asarray(params[k]) for k in ("W_x", "W_h", "W_out"))
    wx = np.asarray(u_t) @ W_x.T
    return dims.scale * (W_out @ (wx[..., :, None] * W_h))


def gm_linearization_identity(u_t, h_prev, params: dict, dims: ModelDims) -> float:
    """Max abs difference between the two sides of the GM linearisation.

    Gate form: ``(diag(dA) + diag(Δt B) B_coup M(u)) h_prev + Δt B B_coup u``.
    Substitution form: the coupled update with ``x_state = B_coup (u + M(u) h_prev)``.
    Both use the tanh-free modulation and a dynamic ``h_prev``.
    """
    u_t = np.asarray(u_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    sel = selectivity(u_t, params, dims)
    dt, B = sel.dt.value, sel.B.value
    dA = discretize(params["A_log"], sel.dt).value
    B_coup = np.asarray(params["B_coup"])
    M = _bilinear_map(u_t, params, dims)
    G = B_coup @ M
    dtB = dt * B
    gate = dA[..., :, None] * np.eye(dims.d_s) + dtB[..., :, None] * G
    lhs = (gate @ h_prev[..., None])[..., 0] + dtB * (u_t @ B_coup.T)
    x_mod = u_t + (M @ h_prev[..., None])[..., 0]
    rhs = dA * h_prev + dtB * (x_mod @ B_coup.T)
    return float(np.max(np.abs(lhs - rhs)))


# p-BIM ------------------------------------------------------------------


def _pbim_terms(sel, u_t, params, dims, stabilize=False, headroom=0.99):
    A = decay_rate(params["A_log"])
    wx = _apply(params["W_x"], u_t)
    # B_coup M(u) = s ((B_coup W_out) ⊙_col (W_x u)) W_h
    P = ad.matmul(params["B_coup"], params["W_out"]) * dims.scale
    BM = ad.matmul(P * ad.reshape(wx, wx.shape[:-1] + (1, wx.shape[-1])), params["W_h"])
    dtB = sel.dt * sel.B
    N = ad.row_scale(dtB, BM)
    diag = ad.exp(A * sel.dt)
    if stabilize:
        # keep each row's abs sum of dA + N under `headroom`; factor is a constant
        rows = np.abs(N.value).sum(axis=-1)
        room = np.maximum(headroom - diag.value, 0.0)
        factor = np.where(rows > room, room / np.maximum(rows, 1e-300), 1.0)
        N = ad.row_scale(factor, N)
    G = ad.diag_embed(diag) + N
    offset = dtB * _apply(params["B_coup"], u_t)
    return G, offset


def pbim_gate(u_t, params: dict, dims: ModelDims, stabilize: bool = False, headroom: float = 0.99):
    """Matrix gate ``G = diag(exp(A Δt)) + N(u)`` and offset ``Δt B (B_coup u)``.

    ``N = (Δt ⊙ B) ⊙_row (B_coup M(u))`` with ``M(u) = s W_out diag(W_x u) W_h``.
    ``stabilize`` rescales rows of ``N`` so ``‖G‖_∞ < 1``; it is off by default.
    """
    u_t = ad.as_tensor(u_t)
    return _pbim_terms(selectivity(u_t, params, dims), u_t, params, dims, stabilize, headroom)


def pbim_step(h_prev, u_t, params: dict, dims: ModelDims, stabilize: bool = False):
    u_t = ad.as_tensor(u_t)
    sel = selectivity(u_t, params, dims)
    G, offset = _pbim_terms(sel, u_t, params, dims, stabilize)
    h_prev = ad.as_tensor(h_prev)
    h = ad.matmul(G, _vec(ad.broadcast_to(h_prev, offset.shape))).reshape(offset.shape) + offset
    return h, _coupled_readout(h, sel, params, u_t)


# dispatch ---------------------------------------------------------------


def step_fn(variant, params: dict, dims: ModelDims, routing=Routing.FULL, stabilize: bool = False):
    """``(h_prev, u_t) -> (h_t, y_t)`` closure for ``variant``."""
    variant, routing = check_routing(variant, routing)
    if variant is Variant.STANDARD:
        return partial(standard_step, params=params, dims=dims)
    if variant is Variant.COUPLED:
        return partial(coupled_step, params=params, dims=dims)
    if variant is Variant.SEQ_BIM:
        return partial(seqbim_step, params=params, dims=dims, routing=routing)
    if variant is Variant.GM:
        return partial(gm_step, params=params, dims=dims)
    return partial(pbim_step, params=params, dims=dims, stabilize=stabilize)


def initial_state(variant, dims: ModelDims, batch_shape=()) -> np.ndarray:
    if Variant(variant) is Variant.STANDARD:
        return np.zeros(tuple(batch_shape) + (dims.d_i, dims.d_s))
    return np.zeros(tuple(batch_shape) + (dims.d_s,))


def _scan_elements(variant, u, params, dims, stabilize):
    sel = selectivity(u, params, dims)
    if variant is Variant.STANDARD:
        dA = discretize(params["A_log"], sel.dt)
        drive = ad.reshape(sel.dt * u, u.shape + (1,)) * ad.reshape(sel.B, sel.B.shape[:-1] + (1, dims.d_s))
        return sel, scan_mod.ScanElement(dA, drive)
    if variant is Variant.P_BIM:
        return sel, scan_mod.ScanElement(*_pbim_terms(sel, u, params, dims, stabilize))
    if variant is Variant.GM:
        gate = _gm_gate(sel, u, params, dims)
    else:
        gate = discretize(params["A_log"], sel.dt)
    return sel, scan_mod.ScanElement(gate, sel.dt * sel.B * _apply(params["B_coup"], u))


def ssm_sequence(
    variant,
    u_seq,
    params: dict,
    dims: ModelDims,
    routing=Routing.FULL,
    method: str = "scan",
    h0=None,
    stabilize: bool = False,
) -> Tensor:
    """SSM-branch outputs for a time-major input ``u_seq`` (L, ..., d_i).

    ``method="scan"`` uses the parallel scan (seq-BIM always loops, its
    update is nonlinear in ``h``); ``method="loop"`` steps one timestep at a
    time with the step functions.
    """
    variant, routing = check_routing(variant, routing)
    u = ad.as_tensor(u_seq)
    if h0 is None:
        h0 = initial_state(variant, dims, u.shape[1:-1])
    if method == "loop" or variant is Variant.SEQ_BIM:
        step = step_fn(variant, params, dims, routing, stabilize)
        h, ys = h0, []
        for t in range(u.shape[0]):
            h, y = step(h, u[t])
            ys.append(y)
        return ad.stack(ys, axis=0)
    if method not in ("scan", "sequential"):
        raise ValueError(f"unknown method {method!r}")
    sel, elements = _scan_elements(variant, u, params, dims, stabilize)
    if method == "scan":
        h = scan_mod.parallel_scan(elements, h0)
    else:
        h = scan_mod.sequential_scan(elements, h0)
    if variant is Variant.STANDARD:
        C = ad.reshape(sel.C, sel.C.shape[:-1] + (1, dims.d_s))
        return ad.sum(h * C, axis=-1) + ad.as_tensor(params["D"]) * u
    return _coupled_readout(h, sel, params, u)


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to run a block besides its weights."""

    variant: Variant
    dims: ModelDims
    routing: Routing = Routing.FULL
    stabilize: bool = False

    def __post_init__(self):
        variant, routing = check_routing(self.variant, self.routing)
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "routing", routing)

    def ssm(self, params: dict, method: str = "scan"):
        return partial(
            ssm_sequence,
            self.variant,
            params=params,
            dims=self.dims,
            routing=self.routing,
            method=method,
            stabilize=self.stabilize,
        )

    def forward(self, params: dict, x_seq, method: str = "scan") -> Tensor:
        """Teacher-forced block output for (L, d_model) or (batch, L, d_model) input."""
        return block_forward(x_seq, params, self.dims, self.ssm(params, method))

    def step(self, params: dict):
        return step_fn(self.variant, params, self.dims, self.routing, self.stabilize)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "routing": self.routing.value,
            "dims": self.dims.to_dict(),
            "stabilize": self.stabilize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(Variant(d["variant"]), ModelDims(**d["dims"]), Routing(d["routing"]), d.get("stabilize", False))
