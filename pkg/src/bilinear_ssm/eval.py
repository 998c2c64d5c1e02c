"""Autoregressive rollout evaluation and seed aggregation.

Indexing: a rollout over ``total`` steps consumes observations
``x_0 .. x_{total-2}`` and returns ``pred`` of shape (n, total, d_model)
where ``pred[:, j]`` is the model's estimate of ``x_j`` (``pred[:, 0]`` is
the true ``x_0``, which is never predicted).  The first ``warmup`` inputs
are ground truth; from input ``warmup`` on, state channels are the
model's own previous predictions.  AR MSE averages indices
``warmup .. total-1``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .ssm_core import block_step, init_block_state
from .tasks import TrajectorySet, get_task
from .variants import ModelSpec

__all__ = [
    "RolloutConfig",
    "EvalReport",
    "SeedResult",
    "DIVERGENCE_THRESHOLD",
    "ar_rollout",
    "ar_mse",
    "aggregate_seeds",
    "divergence_policy",
    "evaluate",
    "reports_to_csv",
    "results_to_json",
]

DIVERGENCE_THRESHOLD = 1e3


@dataclass(frozen=True)
class RolloutConfig:
    total: int = 250
    warmup: int | None = None  # None -> context length - 1
    count: int = 100
    feedback: str = "state"  # "state": exogenous inputs stay ground truth; "all": feed back every channel

    def __post_init__(self):
        if self.total < 2:
            raise ValueError("total must be >= 2")
        if self.warmup is not None and not 1 <= self.warmup < self.total:
            raise ValueError("need 1 <= warmup < total")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.feedback not in ("state", "all"):
            raise ValueError("feedback must be 'state' or 'all'")

    def warmup_for(self, spec: ModelSpec) -> int:
        w = spec.dims.context - 1 if self.warmup is None else self.warmup
        if not 1 <= w < self.total:
            raise ValueError(f"warmup {w} must lie in [1, {self.total})")
        return w


def _as64(params: dict) -> dict:
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def ar_rollout(spec: ModelSpec, params: dict, observations, channels, cfg: RolloutConfig = RolloutConfig()):
    """Roll the block forward with its own state predictions fed back.

    ``observations`` is (n, T, d_model) or (T, d_model) with T >= total;
    ``channels`` are the state channels that get replaced by predictions.
    Runs in float64.  Returns ``(pred, diverged)``; on a non-finite value
    the remaining predictions are NaN and ``diverged`` is True.
    """
    obs = np.asarray(observations, dtype=np.float64)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    if obs.ndim != 3 or obs.shape[-1] != spec.dims.d_model:
        raise ad.ShapeError(f"expected (n, T, {spec.dims.d_model}) observations, got {obs.shape}")
    total = cfg.total
    if obs.shape[1] < total:
        raise ValueError(f"trajectories have {obs.shape[1]} observations, rollout needs {total}")
    warmup = cfg.warmup_for(spec)
    channels = list(channels)
    params = _as64(params)
    step = spec.step(params)
    state = init_block_state(spec.variant, spec.dims, obs.shape[0])
    pred = np.full((obs.shape[0], total, obs.shape[2]), np.nan)
    pred[:, 0] = obs[:, 0]
    x = obs[:, 0]
    diverged = False
    try:
        for t in range(total - 1):
            out, state = block_step(x, params, spec.dims, step, state)
            pred[:, t + 1] = out.value
            if t + 1 < warmup:
                x = obs[:, t + 1]
            elif cfg.feedback == "all":
                x = out.value
            else:
                x = obs[:, t + 1].copy()
                x[:, channels] = out.value[:, channels]
    except ad.NonFiniteError:
        diverged = True
    pred = pred[0] if single else pred
    return pred, diverged


def ar_mse(pred, truth, channels, warmup: int) -> float:
    """Mean squared error over indices ``warmup..`` and ``channels``.

    Both arrays are (n, total, d) or (total, d) and must match in shape.
    """
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if not 0 <= warmup < pred.shape[-2]:
        raise ValueError(f"warmup {warmup} outside the sequence")
    err = pred[..., warmup:, :][..., list(channels)] - truth[..., warmup:, :][..., list(channels)]
    return float(np.mean(err * err))


def divergence_policy(losses=(), ar_value: float | None = None, threshold: float = DIVERGENCE_THRESHOLD) -> bool:
    """True for any non-finite loss, a non-finite AR MSE, or AR MSE above ``threshold``."""
    if any(not math.isfinite(v) for v in losses):
        return True
    if ar_value is None:
        return False
    return not math.isfinite(ar_value) or ar_value > threshold


@dataclass
class EvalReport:
    """Aggregate of per-seed AR MSE; statistics use convergent seeds only."""

    values: list[float]
    diverged: list[bool]
    mean: float
    median: float
    worst: float
    sd: float | None  # sample SD; None with one convergent seed
    n_convergent: int
    improvement_mean: float | None = None
    improvement_median: float | None = None

    @property
    def n_diverged(self) -> int:
        return len(self.values) - self.n_convergent

    def against(self, baseline: "EvalReport") -> "EvalReport":
        """Copy with improvement factors ``baseline / self`` filled in."""
        return EvalReport(
            self.values, self.diverged, self.mean, self.median, self.worst, self.sd, self.n_convergent,
            baseline.mean / self.mean if self.mean > 0 else math.inf,
            baseline.median / self.median if self.median > 0 else math.inf,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_seeds(values, diverged=None) -> EvalReport:
    """Mean, median, worst, sample SD over the seeds not flagged diverged."""
    values = [float(v) for v in values]
    if diverged is None:
        diverged = [divergence_policy(ar_value=v) for v in values]
    diverged = [bool(d) for d in diverged]
    if len(diverged) != len(values):
        raise ValueError("values and divergence flags differ in length")
    kept = [v for v, d in zip(values, diverged) if not d]
    if not kept:
        raise ValueError("no convergent seeds to aggregate")
    return EvalReport(
        values=values,
        diverged=diverged,
        mean=statistics.fmean(kept),
        median=statistics.median(kept),
        worst=max(kept),
        sd=statistics.stdev(kept) if len(kept) > 1 else None,
        n_convergent=len(kept),
    )


@dataclass
class SeedResult:
    task: str
    variant: str
    routing: str
    d_state: int
    context: int
    seed: int
    ar_mse: float
    diverged: bool
    train_diverged: bool = False
    extra: dict = field(default_factory=dict)

    def key(self) -> str:
        return f"{self.task}/{self.variant}/{self.routing}/ds{self.d_state}/L{self.context}/seed{self.seed}"


def evaluate(spec: ModelSpec, params: dict, rollout: TrajectorySet, task: str, seed: int,
             cfg: RolloutConfig = RolloutConfig(), train_losses=()) -> SeedResult:
    """AR rollout over the first ``cfg.count`` trajectories of ``rollout``."""
    channels = get_task(task).state_channels
    obs = rollout.series[: cfg.count, : cfg.total]
    train_div = divergence_policy(train_losses)
    value = math.nan
    div = True
    if not train_div:
        pred, div = ar_rollout(spec, params, obs, channels, cfg)
        if not div:
            value = ar_mse(pred, obs, channels, cfg.warmup_for(spec))
            div = divergence_policy(ar_value=value)
    return SeedResult(
        task, spec.variant.value, spec.routing.value, spec.dims.d_s, spec.dims.context, seed,
        value, div, train_div,
    )


REPORT_COLUMNS = ("task", "variant", "routing", "d_state", "context", "row", "ar_mse", "diverged",
                  "mean", "median", "worst", "sd", "n_convergent", "improvement_mean", "improvement_median")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(groups: list[tuple[dict, list[SeedResult], EvalReport | None]]) -> str:
    """One row per seed plus one aggregate row per group.

    ``groups`` holds ``(labels, results, report)`` with ``labels`` giving
    task/variant/routing/d_state/context.  A group whose seeds all diverged
    has ``report=None`` and an aggregate row with empty statistics.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for labels, results, report in groups:
        head = [labels[k] for k in ("task", "variant", "routing", "d_state", "context")]
        for r in sorted(results, key=lambda r: r.seed):
            w.writerow(head + [f"seed{r.seed}", _cell(r.ar_mse), _cell(r.diverged)] + [""] * 7)
        stats = [""] * 7 if report is None else [
            _cell(report.mean), _cell(report.median), _cell(report.worst), _cell(report.sd),
            _cell(report.n_convergent), _cell(report.improvement_mean), _cell(report.improvement_median),
        ]
        w.writerow(head + ["aggregate", "", ""] + stats)
    return buf.getvalue()


def results_to_json(results: list[SeedResult]) -> str:
    """Summary keyed by ``task/variant/routing/ds<d_s>/L<L>/seed<seed>``."""
    out = {}
    for r in sorted(results, key=SeedResult.key):
        d = asdict(r)
        if not math.isfinite(d["ar_mse"]):
            d["ar_mse"] = None
        out[r.key()] = d
    return json.dumps(out, indent=2, sort_keys=True) + "\n"
