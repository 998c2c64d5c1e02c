"""Teacher-forced training: initialisation, Adam with cosine annealing, logs."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .ssm_core import param_shapes
from .tasks import Dataset, TrajectorySet, get_task
from .variants import ModelSpec

__all__ = [
    "TrainConfig",
    "DESK_SCALE",
    "AdamState",
    "TrainLog",
    "init_params",
    "cosine_lr",
    "adam_update",
    "mse_loss",
    "loss_and_grads",
    "train_step",
    "tf_eval_loss",
    "train_series",
    "train_run",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200_000
    batch_size: int = 100
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    seed: int = 0
    bilinear_init_std: float | None = None  # None -> task default
    dtype: str = "float64"
    checkpoint_every: int = 1_000
    grad_clip: float | None = None
    eval_chunk: int = 1_000
    method: str = "sequential"  # "scan" | "sequential" | "loop"; same model, sequential is fastest here

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.method not in ("scan", "sequential", "loop"):
            raise ValueError("method must be scan, sequential or loop")

    def to_dict(self) -> dict:
        return asdict(self)


#: reduced protocol: 20K iterations, batch 64 (8K train trajectories, 3 seeds)
DESK_SCALE = {"iterations": 20_000, "batch_size": 64}
DESK_COUNTS = (8_000, 1_000, 100)
FULL_COUNTS = (66_000, 5_000, 100)
DESK_SEEDS = (0, 1, 2)


def init_params(spec: ModelSpec, cfg: TrainConfig | None = None, seed: int | None = None,
                bilinear_std: float = 0.5) -> dict[str, np.ndarray]:
    """Fresh weights for ``spec``; deterministic in ``seed``.

    Bilinear weights ~ N(0, std^2); ``A_log = log(1..d_s)``; ``D = 1``;
    Δt bias puts softplus(bias) log-uniform in [1e-3, 1e-1]; conv bias 0;
    every other matrix ~ N(0, 1/fan_in).
    """
    if cfg is not None:
        seed = cfg.seed if seed is None else seed
        if cfg.bilinear_init_std is not None:
            bilinear_std = cfg.bilinear_init_std
    rng = np.random.default_rng([0 if seed is None else seed, 7919])
    dims = spec.dims
    params = {}
    for name, shape in param_shapes(spec.variant, dims).items():
        if name in ("W_h", "W_x", "W_out"):
            params[name] = rng.normal(0.0, bilinear_std, shape)
        elif name == "A_log":
            a = np.log(np.arange(1, dims.d_s + 1, dtype=np.float64))
            params[name] = np.broadcast_to(a, shape).copy()
        elif name == "D":
            params[name] = np.ones(shape)
        elif name == "dt_bias":
            dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), shape))
            params[name] = dt + np.log(-np.expm1(-dt))  # inverse softplus
        elif name == "conv_bias":
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] if name in ("B_coup", "C_coup", "conv_weight") else shape[0]
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
    if cfg is not None and cfg.dtype == "float32":
        params = {k: v.astype(np.float32) for k, v in params.items()}
    return params


def cosine_lr(it: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr_start`` at 0 to ``lr_end`` at ``iterations - 1``."""
    if not 0 <= it < cfg.iterations:
        raise ValueError(f"iteration {it} outside [0, {cfg.iterations})")
    if cfg.iterations == 1:
        return cfg.lr_start
    frac = it / (cfg.iterations - 1)
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params: dict, grads: dict, state: AdamState, lr: float, clip: float | None = None):
    """One bias-corrected Adam step; returns new ``(params, state)`` without mutating inputs."""
    if clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip:
            grads = {k: g * (clip / norm) for k, g in grads.items()}
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step=t)


def mse_loss(pred, target, channels) -> ad.Tensor:
    """Mean squared error over all leading axes and the selected channels."""
    channels = list(channels)
    pred = ad.as_tensor(pred)
    lo, hi = channels[0], channels[-1] + 1
    if channels == list(range(lo, hi)):
        sel = pred[..., lo:hi]
    else:
        sel = ad.stack([pred[..., c] for c in channels], axis=-1)
    err = sel - np.asarray(target)[..., channels]
    return ad.mean(err * err)


def loss_and_grads(spec: ModelSpec, params: dict, obs, targets, channels, method: str = "scan"):
    tape = ad.Tape()
    leaves = {k: tape.variable(v, dtype=v.dtype) for k, v in params.items()}
    loss = mse_loss(spec.forward(leaves, obs, method), targets, channels)
    g = tape.backward(loss)
    return float(loss.value), {k: g[t.node] for k, t in leaves.items()}


def train_step(spec: ModelSpec, params: dict, adam: AdamState, obs, targets, channels, lr: float,
               clip: float | None = None, method: str = "scan"):
    """Loss, gradient and Adam update on one batch.

    Returns ``(params, adam, loss)``; on a non-finite forward, backward or
    update the inputs come back untouched with ``loss = nan``.
    """
    dtype = next(iter(params.values())).dtype
    obs = np.asarray(obs, dtype=dtype)
    try:
        loss, grads = loss_and_grads(spec, params, obs, targets, channels, method)
    except ad.NonFiniteError:
        return params, adam, float("nan")
    if not all(np.isfinite(g).all() for g in grads.values()):
        return params, adam, float("nan")
    new_params, new_adam = adam_update(params, grads, adam, lr, clip)
    if not all(np.isfinite(p).all() for p in new_params.values()):
        return params, adam, float("nan")
    return new_params, new_adam, loss


def tf_eval_loss(spec: ModelSpec, params: dict, data: TrajectorySet, channels, chunk: int = 1_000) -> float:
    """Teacher-forced next-step MSE over a whole split (64-bit)."""
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    total, count = 0.0, 0
    try:
        for start in range(0, len(data), chunk):
            obs = data.observations[start : start + chunk]
            tgt = data.targets[start : start + chunk]
            pred = spec.forward(params, obs).value[..., list(channels)]
            total += float(np.sum((pred - tgt[..., list(channels)]) ** 2))
            count += pred.size
    except ad.NonFiniteError:
        return float("nan")
    return total / count


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    diverged: bool = False
    diverged_at: int | None = None

    COLUMNS = ("iteration", "train_loss", "tf_eval_loss", "lr", "wallclock_s", "diverged")

    @property
    def train_losses(self) -> list[float]:
        return [r["train_loss"] for r in self.rows]

    def to_csv(self, wallclock: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.COLUMNS if wallclock else tuple(c for c in self.COLUMNS if c != "wallclock_s")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in cols])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append({
                "iteration": int(r["iteration"]),
                "train_loss": float(r["train_loss"]),
                "tf_eval_loss": float(r["tf_eval_loss"]),
                "lr": float(r["lr"]),
                "wallclock_s": float(r.get("wallclock_s") or 0.0),
                "diverged": r["diverged"] == "1",
            })
        div = [r["iteration"] for r in rows if r["diverged"]]
        return cls(rows, bool(div), div[0] if div else None)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train_series(spec: ModelSpec, series: np.ndarray, channels, cfg: TrainConfig, params: dict | None = None,
                 bilinear_std: float = 0.5, evaluate=None, progress=None):
    """Teacher-forced training on raw series of shape (n, T + 1, d_model).

    Batches of ``cfg.batch_size`` windows (the first ``context + 1``
    observations of each sampled trajectory) are drawn uniformly with
    replacement by a generator seeded from ``cfg.seed``.  Every
    ``cfg.checkpoint_every`` iterations, and at the end, a row is logged
    with the train loss averaged since the previous row and
    ``evaluate(params)`` (NaN when no evaluator is given).  A non-finite
    loss halts the run and marks the log diverged.
    """
    series = np.asarray(series)
    if series.ndim != 3 or series.shape[-1] != spec.dims.d_model:
        raise ad.ShapeError(f"expected (n, T+1, {spec.dims.d_model}) series, got {series.shape}")
    L = spec.dims.context
    if series.shape[1] < L + 1:
        raise ValueError(f"trajectories have {series.shape[1] - 1} steps, context is {L}")
    if params is None:
        params = init_params(spec, cfg, bilinear_std=bilinear_std)
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng([cfg.seed, 104729])
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    windows = series[:, : L + 1].astype(dtype)
    trainlog = TrainLog()
    t0 = time.perf_counter()
    acc, n_acc = 0.0, 0
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(windows), cfg.batch_size)
        batch = windows[idx]
        lr = cosine_lr(it, cfg)
        params, adam, loss = train_step(spec, params, adam, batch[:, :-1], batch[:, 1:], channels, lr,
                                        cfg.grad_clip, cfg.method)
        if not math.isfinite(loss):
            trainlog.diverged, trainlog.diverged_at = True, it
            trainlog.rows.append({
                "iteration": it, "train_loss": float("nan"), "tf_eval_loss": float("nan"),
                "lr": lr, "wallclock_s": time.perf_counter() - t0, "diverged": True,
            })
            log.warning("%s seed %d diverged at iteration %d", spec.variant.value, cfg.seed, it)
            break
        acc += loss
        n_acc += 1
        if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.iterations:
            ev = float("nan") if evaluate is None else evaluate(params)
            trainlog.rows.append({
                "iteration": it + 1, "train_loss": acc / n_acc, "tf_eval_loss": ev,
                "lr": lr, "wallclock_s": time.perf_counter() - t0, "diverged": False,
            })
            if progress is not None:
                progress(trainlog.rows[-1])
            acc, n_acc = 0.0, 0
    return params, trainlog


def train_run(spec: ModelSpec, data: Dataset, cfg: TrainConfig, params: dict | None = None,
              progress=None):
    """Train on ``data.train``, logging TF-eval loss on ``data.test``."""
    task = get_task(data.task)
    if spec.dims.d_model != task.d_model:
        raise ValueError(f"model d_model={spec.dims.d_model} but task has {task.d_model} channels")
    channels = task.state_channels
    test = TrajectorySet(data.test.series[:, : spec.dims.context + 1], data.test.input_channel)

    def evaluate(p):
        return tf_eval_loss(spec, p, test, channels, cfg.eval_chunk)

    return train_series(spec, data.train.series, channels, cfg, params, task.bilinear_init_std, evaluate, progress)
