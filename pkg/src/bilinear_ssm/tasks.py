"""Synthetic benchmarks: the multiple input-delay pendulum and NARMA-10.

Every trajectory draws its inputs from its own generator seeded by the
counter tuple ``(master_seed, task_code, split_code, index, attempt)``, so
generation is reproducible and independent of batching or worker count.
Rejected trajectories are redrawn with ``attempt + 1``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "PendulumConfig",
    "NarmaConfig",
    "Trajectory",
    "TrajectorySet",
    "Dataset",
    "TaskSpec",
    "TASKS",
    "get_task",
    "fir_weights",
    "pendulum_response",
    "narma_response",
    "gen_pendulum",
    "gen_narma",
    "generate_set",
    "build_dataset",
    "ResampleBudgetExceeded",
]

log = logging.getLogger(__name__)


class ResampleBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class PendulumConfig:
    g_over_l: float = 9.8
    damping: float = 0.05
    dt: float = 0.01
    buffer_len: int = 24
    gamma: float = 0.15
    u_low: float = -1.0
    u_high: float = 1.0
    burn_in: int | None = None  # None -> buffer_len
    max_attempts: int = 100

    def __post_init__(self):
        if self.buffer_len < 1:
            raise ValueError("buffer_len must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def burn(self) -> int:
        return self.buffer_len if self.burn_in is None else self.burn_in


@dataclass(frozen=True)
class NarmaConfig:
    coefficients: tuple[float, float, float, float] = (0.3, 0.05, 1.5, 0.1)
    order: int = 10
    u_low: float = 0.0
    u_high: float = 0.5
    bound: float = 1.0
    burn_in: int = 20
    max_attempts: int = 100


@dataclass(frozen=True)
class TaskSpec:
    name: str
    code: int
    channels: tuple[str, ...]
    state_channels: tuple[int, ...]
    input_channels: tuple[int, ...]
    bilinear_init_std: float

    @property
    def d_model(self) -> int:
        return len(self.channels)


TASKS = {
    "input-delay": TaskSpec("input-delay", 1, ("theta", "omega", "u"), (0, 1), (2,), 0.5),
    "narma10": TaskSpec("narma10", 2, ("u", "y"), (1,), (0,), 0.1),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def default_config(task: str):
    return PendulumConfig() if get_task(task).name == "input-delay" else NarmaConfig()


@dataclass
class Trajectory:
    """One sequence; ``target[t] == observation[t + 1]``."""

    inputs: np.ndarray  # (T,)
    observation: np.ndarray  # (T, d_model)
    target: np.ndarray  # (T, d_model)

    @classmethod
    def from_series(cls, series: np.ndarray, input_channel: int) -> "Trajectory":
        return cls(series[:-1, input_channel].copy(), series[:-1].copy(), series[1:].copy())


@dataclass
class TrajectorySet:
    """``series`` holds T + 1 observations per trajectory, (n, T + 1, d_model)."""

    series: np.ndarray
    input_channel: int
    attempts: int = 0

    def __len__(self) -> int:
        return self.series.shape[0]

    @property
    def length(self) -> int:
        return self.series.shape[1] - 1

    @property
    def observations(self) -> np.ndarray:
        return self.series[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.series[:, 1:]

    def __getitem__(self, i) -> Trajectory:
        return Trajectory.from_series(self.series[i], self.input_channel)


@dataclass
class Dataset:
    task: str
    config: PendulumConfig | NarmaConfig
    seed: int
    train: TrajectorySet
    test: TrajectorySet
    rollout: TrajectorySet
    meta: dict = field(default_factory=dict)

    def splits(self) -> dict[str, TrajectorySet]:
        return {"train": self.train, "test": self.test, "rollout": self.rollout}


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serialisable description."""
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# pendulum ---------------------------------------------------------------


def fir_weights(K: int, gamma: float) -> np.ndarray:
    """Normalised ``exp(-gamma k)`` for k = 0..K-1."""
    if K < 1:
        raise ValueError("K must be >= 1")
    w = np.exp(-gamma * np.arange(K))
    return w / w.sum()


def pendulum_response(u: np.ndarray, cfg: PendulumConfig, history=None, state0=(0.0, 0.0)) -> np.ndarray:
    """Integrate the FIR-driven pendulum, from rest unless ``state0`` is given.

    ``u`` is (..., T); ``history`` (..., K-1) holds the inputs before u[0],
    most recent last (zeros if omitted).  Returns (..., T + 1, 2) with
    (theta, omega) at steps 0..T.
    """
    u = np.asarray(u, dtype=np.float64)
    K = cfg.buffer_len
    w = fir_weights(K, cfg.gamma)
    if history is None:
        history = np.zeros(u.shape[:-1] + (K - 1,))
    full = np.concatenate([history, u], axis=-1)  # u_{t-k} = full[..., t + K-1 - k]
    T = u.shape[-1]
    theta = np.broadcast_to(np.asarray(state0[0], dtype=np.float64), u.shape[:-1]).copy()
    omega = np.broadcast_to(np.asarray(state0[1], dtype=np.float64), u.shape[:-1]).copy()
    out = np.zeros(u.shape[:-1] + (T + 1, 2))
    out[..., 0, 0], out[..., 0, 1] = theta, omega
    for t in range(T):
        drive = full[..., t : t + K] @ w[::-1]
        omega = omega + (-cfg.g_over_l * np.sin(theta) - cfg.damping * omega + drive) * cfg.dt
        theta = theta + omega * cfg.dt
        out[..., t + 1, 0] = theta
        out[..., t + 1, 1] = omega
    return out


def _rng(seed: int, task: str, split: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([seed, get_task(task).code, split, index, attempt])


def _pendulum_batch(cfg: PendulumConfig, length: int, seed, split, indices, attempts):
    burn = cfg.burn
    n = len(indices)
    u = np.empty((n, burn + length + 1))
    for j, (i, a) in enumerate(zip(indices, attempts)):
        u[j] = _rng(seed, "input-delay", split, i, a).uniform(cfg.u_low, cfg.u_high, burn + length + 1)
    K = cfg.buffer_len
    hist = np.zeros((n, K - 1))
    m = min(burn, K - 1)
    if m:
        hist[:, K - 1 - m :] = u[:, burn - m : burn]
    rec = u[:, burn:]  # u_0 .. u_length
    states = pendulum_response(rec[:, :-1], cfg, hist)
    series = np.concatenate([states, rec[:, :, None]], axis=-1)
    ok = np.isfinite(series).all(axis=(1, 2))
    return series, ok


def gen_pendulum(cfg: PendulumConfig, length: int, seed: int, split: int = 0, index: int = 0) -> Trajectory:
    """One pendulum trajectory with channels (theta, omega, u)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return Trajectory.from_series(_generate("input-delay", cfg, 1, length, seed, split, index)[0][0], 2)


# NARMA-10 ---------------------------------------------------------------


def narma_response(u: np.ndarray, cfg: NarmaConfig = NarmaConfig()) -> np.ndarray:
    """NARMA recurrence from zero history.

    ``y[t+1] = a y[t] + b y[t] sum_{i<order} y[t-i] + c u[t-order+1] u[t] + d``.
    ``u`` is (..., T); returns y (..., T + 1) with ``y[0] = 0``.
    """
    u = np.asarray(u, dtype=np.float64)
    a, b, c, d = cfg.coefficients
    o = cfg.order
    T = u.shape[-1]
    y = np.zeros(u.shape[:-1] + (T + 1,))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            # left-to-right accumulation keeps the rounding independent of numpy's pairwise sum
            mem = np.zeros(u.shape[:-1])
            for k in range(max(t - o + 1, 0), t + 1):
                mem = mem + y[..., k]
            lag = u[..., t - o + 1] if t >= o - 1 else 0.0
            y[..., t + 1] = a * y[..., t] + b * y[..., t] * mem + c * lag * u[..., t] + d
    return y


def _narma_batch(cfg: NarmaConfig, length: int, seed, split, indices, attempts):
    burn = cfg.burn_in
    n = len(indices)
    total = burn + length + 1
    u = np.empty((n, total))
    for j, (i, a) in enumerate(zip(indices, attempts)):
        u[j] = _rng(seed, "narma10", split, i, a).uniform(cfg.u_low, cfg.u_high, total)
    y = narma_response(u[:, :-1], cfg)  # y_0 .. y_{total-1}
    ok = (np.isfinite(y) & (np.abs(y) <= cfg.bound)).all(axis=-1)
    series = np.stack([u[:, burn:], y[:, burn:]], axis=-1)
    return series, ok


def gen_narma(cfg: NarmaConfig, length: int, seed: int, split: int = 0, index: int = 0) -> Trajectory:
    """One NARMA-10 trajectory with channels (u, y)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return Trajectory.from_series(_generate("narma10", cfg, 1, length, seed, split, index)[0][0], 0)


# assembly ---------------------------------------------------------------


def _generate(task, cfg, count, length, seed, split, start=0):
    batch_fn = _pendulum_batch if get_task(task).name == "input-delay" else _narma_batch
    indices = np.arange(start, start + count)
    attempts = np.zeros(count, dtype=np.int64)
    series, ok = batch_fn(cfg, length, seed, split, indices, attempts)
    redraws = 0
    while not ok.all():
        bad = np.flatnonzero(~ok)
        attempts[bad] += 1
        if attempts[bad].max() >= cfg.max_attempts:
            raise ResampleBudgetExceeded(
                f"{task}: trajectory {indices[bad[0]]} rejected {cfg.max_attempts} times"
            )
        redraws += len(bad)
        new, new_ok = batch_fn(cfg, length, seed, split, indices[bad], attempts[bad])
        series[bad], ok[bad] = new, new_ok
    return series, redraws


SPLITS = {"train": 0, "test": 1, "rollout": 2}


def generate_set(task: str, cfg, count: int, length: int, seed: int, split: str, chunk: int = 4096) -> TrajectorySet:
    if count < 1:
        raise ValueError("count must be >= 1")
    parts, redraws = [], 0
    for start in range(0, count, chunk):
        s, r = _generate(task, cfg, min(chunk, count - start), length, seed, SPLITS[split], start)
        parts.append(s)
        redraws += r
    if redraws:
        log.info("%s/%s: %d of %d trajectories redrawn (%.3f%%)", task, split, redraws, count, 100 * redraws / count)
    return TrajectorySet(np.concatenate(parts), get_task(task).input_channels[0], redraws)


def build_dataset(
    task: str,
    counts=(66_000, 5_000, 100),
    lengths=(50, 50, 250),
    seed: int = 0,
    config=None,
) -> Dataset:
    """Train / test / rollout splits, deterministic in ``seed``.

    ``lengths`` count model steps, so each trajectory stores ``length + 1``
    observations.
    """
    spec = get_task(task)
    cfg = config if config is not None else default_config(spec.name)
    sets = {
        name: generate_set(spec.name, cfg, n, length, seed, name)
        for name, n, length in zip(SPLITS, counts, lengths)
    }
    total = sum(counts)
    redraws = sum(s.attempts for s in sets.values())
    meta = {"resample_rate": redraws / total if total else 0.0}
    return Dataset(spec.name, cfg, seed, meta=meta, **sets)


def dataset_description(ds: Dataset) -> dict:
    return {
        "task": ds.task,
        "config": asdict(ds.config),
        "seed": ds.seed,
        "counts": [len(s) for s in ds.splits().values()],
        "lengths": [s.length for s in ds.splits().values()],
        "channels": list(get_task(ds.task).channels),
    }

