"""``bssm`` command line: datasets, training, evaluation, sweeps and checks.

Output layout under the output root (``--output`` or ``$BSSM_OUTPUT_ROOT``)::

    data/<task>-<hash>/                 dataset splits + manifest.json
    runs/<task>/<cell>-<hash>/seed<k>/  checkpoint.bin, train_log.csv, manifest.json
    reports/<name>/                     eval.csv, eval.json, comparison/sweep/ablation tables

Exit codes: 0 success, 1 a check failed, 2 invalid configuration, 3 missing
or unreadable files, 4 every seed of some model diverged.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import io as bio
from .autodiff import grad_check
from .eval import RolloutConfig, SeedResult, aggregate_seeds, evaluate, reports_to_csv, results_to_json
from .scan import parallel_scan, sequential_scan
from .ssm_core import ModelDims, Routing, Variant, count_params
from .tasks import TASKS, ResampleBudgetExceeded, build_dataset, config_hash, default_config, get_task
from .train import DESK_COUNTS, DESK_SCALE, DESK_SEEDS, FULL_COUNTS, TrainConfig, TrainLog, train_run
from .variants import ModelSpec

log = logging.getLogger("bssm")

OUTPUT_ENV = "BSSM_OUTPUT_ROOT"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4
ALL_VARIANTS = [v.value for v in Variant]


class ConfigError(ValueError):
    pass


# configuration ----------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    """One model configuration within an experiment."""

    variant: str
    routing: str = "full"
    d_state: int = 8
    d_inner: int | None = None
    context: int = 50

    def spec(self, task: str) -> ModelSpec:
        dims = ModelDims(get_task(task).d_model, self.d_state, self.d_inner, self.context)
        return ModelSpec(Variant(self.variant), dims, Routing(self.routing))

    @property
    def slug(self) -> str:
        s = f"{self.variant}-{self.routing}-ds{self.d_state}-L{self.context}"
        return s if self.d_inner is None else f"{s}-di{self.d_inner}"


PRESETS: dict[str, dict] = {
    "table2": {"tasks": ["input-delay"], "variants": ALL_VARIANTS, "seeds": list(range(11))},
    "table3": {"tasks": ["narma10"], "variants": ALL_VARIANTS, "seeds": list(range(11))},
    "table5": {"tasks": ["input-delay", "narma10"], "ablation": True, "seeds": [0, 1, 2]},
    "table7": {
        "tasks": ["narma10"], "variants": ALL_VARIANTS, "seeds": list(range(11)),
        "sweep": {"axis": "L", "contexts": [25, 50, 75, 100], "d_states": [8, 16]},
    },
}
for _name in list(PRESETS):
    PRESETS[f"{_name}-desk"] = dict(PRESETS[_name], desk_scale=True)
    if "seeds" in PRESETS[_name] and len(PRESETS[_name]["seeds"]) > len(DESK_SEEDS):
        PRESETS[f"{_name}-desk"]["seeds"] = list(DESK_SEEDS)

# configurations whose block parameter count sits near the d_s=16 bilinear models
PARAM_MATCHED = [
    Cell("coupled", d_state=16, d_inner=12),
    Cell("coupled", d_state=24),
    Cell("gm", d_state=16),
    Cell("gm", d_state=8, d_inner=12),
    Cell("seq-bim", d_state=16),
    Cell("p-bim", d_state=16),
]


@dataclass
class Experiment:
    tasks: list[str]
    cells: list[Cell]
    seeds: list[int]
    counts: tuple[int, int, int]
    data_seed: int
    train: TrainConfig
    rollout: RolloutConfig
    output: Path
    workers: int
    name: str

    def lengths(self) -> tuple[int, int, int]:
        longest = max(c.context for c in self.cells)
        return (max(50, longest), max(50, longest), max(250, self.rollout.total))

    def data_description(self, task: str) -> dict:
        return {
            "task": task,
            "config": asdict(default_config(task)),
            "seed": self.data_seed,
            "counts": list(self.counts),
            "lengths": list(self.lengths()),
            "channels": list(get_task(task).channels),
        }

    def data_dir(self, task: str) -> Path:
        return self.output / "data" / f"{task}-{config_hash(self.data_description(task))}"

    def run_hash(self, task: str, cell: Cell) -> str:
        train = {k: v for k, v in self.train.to_dict().items() if k != "seed"}
        return config_hash({
            "data": config_hash(self.data_description(task)),
            "model": cell.spec(task).to_dict(),
            "train": train,
        })

    def run_dir(self, task: str, cell: Cell, seed: int) -> Path:
        return self.output / "runs" / task / f"{cell.slug}-{self.run_hash(task, cell)}" / f"seed{seed}"

    def report_dir(self) -> Path:
        return self.output / "reports" / self.name

    def resolved(self) -> dict:
        return {
            "tasks": self.tasks,
            "cells": [asdict(c) for c in self.cells],
            "seeds": self.seeds,
            "data": {"counts": list(self.counts), "lengths": list(self.lengths()), "seed": self.data_seed},
            "train": self.train.to_dict(),
            "rollout": asdict(self.rollout),
            "output": str(self.output),
            "workers": self.workers,
            "name": self.name,
            "code_version": __version__,
        }

    def config_hash(self) -> str:
        d = self.resolved()
        for k in ("output", "workers"):
            d.pop(k)
        return config_hash(d)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        elif v is not None:
            out[k] = v
    return out


def _parse_list(text, cast=str):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [cast(t) for t in text]
    items = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part and cast is int:
            lo, hi = part.split("..")
            items.extend(range(int(lo), int(hi) + 1))
        elif part:
            items.append(cast(part))
    return items


def _flag_config(args) -> dict:
    """CLI flags as a nested config fragment (``None`` leaves file values alone)."""
    g = lambda name: getattr(args, name, None)  # noqa: E731
    tasks = _parse_list(g("task"))
    return {
        "tasks": tasks,
        "variants": _parse_list(g("variant")),
        "routing": g("routing"),
        "seeds": _parse_list(g("seeds"), int),
        "desk_scale": True if g("desk_scale") else None,
        "workers": g("workers"),
        "output": g("output"),
        "name": g("name"),
        "model": {"d_state": g("d_state"), "d_inner": g("d_inner"), "context": g("context")},
        "train": {
            "iterations": g("iterations"), "batch_size": g("batch_size"), "dtype": g("dtype"),
            "checkpoint_every": g("checkpoint_every"), "grad_clip": g("grad_clip"), "method": g("method"),
            "bilinear_init_std": g("bilinear_init_std"),
        },
        "data": {"counts": _parse_list(g("counts"), int), "seed": g("data_seed")},
        "rollout": {"total": g("rollout_total"), "count": g("rollout_count"), "feedback": g("feedback")},
    }


def load_config(args) -> tuple[dict, str]:
    """Preset, then YAML file, then flags; returns the merged dict and a report name."""
    cfg: dict = {}
    name = None
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        cfg = copy.deepcopy(PRESETS[args.preset])
        name = args.preset
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        if "preset" in doc:
            p = doc.pop("preset")
            if p not in PRESETS:
                raise ConfigError(f"unknown preset {p!r}")
            cfg = _merge(copy.deepcopy(PRESETS[p]), cfg)
            name = name or p
        cfg = _merge(cfg, doc)
        name = name or path.stem
    cfg = _merge(cfg, _flag_config(args))
    return cfg, cfg.get("name") or name


KNOWN_KEYS = {"tasks", "task", "variants", "routing", "seeds", "desk_scale", "workers", "output",
              "name", "model", "train", "data", "rollout", "sweep", "ablation", "cells"}


def build_experiment(cfg: dict, name: str | None, cells: list[Cell] | None = None) -> Experiment:
    """Validate a merged config dict; raises :class:`ConfigError` before any compute."""
    unknown = set(cfg) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        tasks = cfg.get("tasks") or ([cfg["task"]] if cfg.get("task") else None)
        if not tasks:
            raise ConfigError("no task given (--task or a preset)")
        tasks = [get_task(t).name for t in tasks]
        desk = bool(cfg.get("desk_scale"))
        model = cfg.get("model") or {}
        unknown = set(model) - {"d_state", "d_inner", "context"}
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        if cells is None:
            if cfg.get("cells"):
                cells = [Cell(**c) for c in cfg["cells"]]
            else:
                variants = cfg.get("variants") or ALL_VARIANTS
                routing = cfg.get("routing") or "full"
                cells = [
                    Cell(v, routing, model.get("d_state") or 8, model.get("d_inner"), model.get("context") or 50)
                    for v in variants
                ]
        for t in tasks:
            for c in cells:
                c.spec(t)  # raises on bad variant/routing/dims
        seeds = [int(s) for s in (cfg.get("seeds") or (list(DESK_SEEDS) if desk else [0]))]
        if len(set(seeds)) != len(seeds):
            raise ConfigError("duplicate seeds")
        train_over = dict(cfg.get("train") or {})
        base = dict(DESK_SCALE) if desk else {}
        train_over = {k: v for k, v in train_over.items() if v is not None}
        names = {f.name for f in fields(TrainConfig)}
        unknown = set(train_over) - names
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        train = TrainConfig(**{**base, **train_over})
        data = cfg.get("data") or {}
        counts = tuple(data.get("counts") or (DESK_COUNTS if desk else FULL_COUNTS))
        if len(counts) != 3 or min(counts) < 1:
            raise ConfigError("data.counts needs three positive values (train, test, rollout)")
        roll = {k: v for k, v in (cfg.get("rollout") or {}).items() if v is not None}
        roll.setdefault("count", min(RolloutConfig.count, counts[2]))
        rollout = RolloutConfig(**roll)
        if rollout.count > counts[2]:
            raise ConfigError(f"rollout.count {rollout.count} exceeds {counts[2]} rollout trajectories")
        output = Path(cfg.get("output") or os.environ.get(OUTPUT_ENV) or "runs")
        workers = int(cfg.get("workers") or os.cpu_count() or 1)
        if workers < 1:
            raise ConfigError("workers must be >= 1")
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    exp = Experiment(tasks, cells, seeds, counts, int(data.get("seed") or 0), train, rollout, output, workers, "")
    exp.name = name or f"custom-{exp.config_hash()[:8]}"
    if not desk and train.iterations >= 100_000:
        log.warning("full-scale protocol: %d iterations x %d runs; expect a long runtime",
                    train.iterations, len(cells) * len(seeds) * len(tasks))
    return exp


# data -------------------------------------------------------------------


def ensure_data(exp: Experiment, task: str, force: bool = False) -> Path:
    d = exp.data_dir(task)
    manifest = d / "manifest.json"
    want = config_hash(exp.data_description(task))
    if manifest.exists() and not force:
        if json.loads(manifest.read_text()).get("config_hash") == want:
            print(f"{d}: exists, skipped")
            return d
    ds = build_dataset(task, exp.counts, exp.lengths(), exp.data_seed)
    bio.save_dataset(ds, d)
    print(f"{d}: wrote {exp.counts[0]}/{exp.counts[1]}/{exp.counts[2]} trajectories "
          f"(resample rate {ds.meta['resample_rate']:.4%})")
    return d


def require_data(exp: Experiment, task: str) -> Path:
    d = exp.data_dir(task)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {d}; run `bssm gen-data` with the same options first")
    return d


# training / evaluation jobs ---------------------------------------------


def _stamp(exp: Experiment, task: str, cell: Cell, seed: int) -> str:
    return f"# config_hash={exp.run_hash(task, cell)} code_version={__version__} seed={seed}\n"


def _strip_comments(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


def _train_job(exp: Experiment, task: str, cell: Cell, seed: int, force: bool) -> dict:
    rd = exp.run_dir(task, cell, seed)
    ckpt = rd / "checkpoint.bin"
    if ckpt.exists() and not force:
        header, _ = bio.load_checkpoint(ckpt)
        if header.get("config_hash") == exp.run_hash(task, cell):
            return {"run": str(rd), "skipped": True, "diverged": header.get("diverged", False)}
    ds = bio.load_dataset(exp.data_dir(task))
    spec = cell.spec(task)
    cfg = TrainConfig(**{**exp.train.to_dict(), "seed": seed})
    t0 = time.time()
    params, tlog = train_run(spec, ds, cfg)
    header = {
        "variant": spec.variant.value, "routing": spec.routing.value, "dims": spec.dims.to_dict(),
        "model": spec.to_dict(), "config_hash": exp.run_hash(task, cell), "code_version": __version__,
        "seed": seed, "iteration": tlog.rows[-1]["iteration"], "diverged": tlog.diverged,
        "task": task, "train": cfg.to_dict(),
    }
    rd.mkdir(parents=True, exist_ok=True)
    bio.save_checkpoint(ckpt, params, header)
    bio.atomic_write(rd / "train_log.csv", _stamp(exp, task, cell, seed) + tlog.to_csv(wallclock=False))
    bio.write_json(rd / "manifest.json", {
        **{k: header[k] for k in ("config_hash", "code_version", "seed", "task", "iteration", "diverged")},
        "created_unix": t0, "elapsed_s": time.time() - t0,
        "wallclock_s": [r["wallclock_s"] for r in tlog.rows],
    })
    return {"run": str(rd), "skipped": False, "diverged": tlog.diverged}


def _eval_job(exp: Experiment, task: str, cell: Cell, seed: int) -> SeedResult:
    rd = exp.run_dir(task, cell, seed)
    ckpt = rd / "checkpoint.bin"
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}; run `bssm train` first")
    header, params = bio.load_checkpoint(ckpt)
    _, rollout = bio.load_split(exp.data_dir(task) / "rollout.bin")
    spec = ModelSpec.from_dict(header["model"])
    losses = TrainLog.from_csv(_strip_comments((rd / "train_log.csv").read_text())).train_losses
    res = evaluate(spec, params, rollout, task, seed, exp.rollout, losses)
    res.extra = {"params": count_params(spec.variant, spec.dims), "d_inner": spec.dims.d_i}
    return res


def _run_jobs(fn, jobs: list[tuple], workers: int) -> list:
    if workers == 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]


def _jobs(exp: Experiment) -> list[tuple[str, Cell, int]]:
    return [(t, c, s) for t in exp.tasks for c in exp.cells for s in exp.seeds]


def train_all(exp: Experiment, force: bool = False) -> list[dict]:
    out = _run_jobs(_train_job, [(exp, t, c, s, force) for t, c, s in _jobs(exp)], exp.workers)
    for (t, c, s), r in zip(_jobs(exp), out):
        status = "skipped (exists)" if r["skipped"] else ("DIVERGED" if r["diverged"] else "done")
        print(f"{t} {c.slug} seed{s}: {status}")
    return out


def eval_all(exp: Experiment) -> list[SeedResult]:
    return _run_jobs(_eval_job, [(exp, t, c, s) for t, c, s in _jobs(exp)], exp.workers)


def _fmt(v, digits: int = 4) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return f"{v:.{digits}g}" if isinstance(v, float) else str(v)


def group_reports(exp: Experiment, results: list[SeedResult]):
    """``{(task, cell): (results, report or None)}`` with improvements against Standard.

    ``results`` must be in :func:`_jobs` order, as :func:`eval_all` returns them.
    """
    by_cell: dict = {}
    for (t, c, _), r in zip(_jobs(exp), results):
        by_cell.setdefault((t, c), []).append(r)
    groups = {}
    for key, rs in by_cell.items():
        try:
            rep = aggregate_seeds([r.ar_mse for r in rs], [r.diverged for r in rs])
        except ValueError:
            rep = None
        groups[key] = (rs, rep)
    for (t, c), (rs, rep) in groups.items():
        base = groups.get((t, Cell("standard", "full", c.d_state, None, c.context)))
        if rep is not None and base is not None and base[1] is not None:
            groups[(t, c)] = (rs, rep.against(base[1]))
    return groups


def _labels(task: str, c: Cell) -> dict:
    return {"task": task, "variant": c.variant, "routing": c.routing, "d_state": c.d_state, "context": c.context}


def comparison_table(exp: Experiment, groups) -> str:
    """Mean / Med. / Worst / SD / Impr. per model, one block per task."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "model", "params", "mean", "median", "worst", "sd", "impr_mean", "impr_median",
                "convergent", "seeds"])
    for (t, c), (rs, rep) in groups.items():
        spec = c.spec(t)
        label = spec.variant.label if c.routing == "full" else f"{spec.variant.label} ({c.routing})"
        row = [t, label, count_params(spec.variant, spec.dims)]
        if rep is None:
            row += ["diverged"] + [""] * 6 + [0, len(rs)]
        else:
            row += [_fmt(rep.mean), _fmt(rep.median), _fmt(rep.worst), _fmt(rep.sd),
                    _fmt(rep.improvement_mean, 3), _fmt(rep.improvement_median, 3), rep.n_convergent, len(rs)]
        w.writerow(row)
    return buf.getvalue()


def write_reports(exp: Experiment, results: list[SeedResult], groups) -> Path:
    rd = exp.report_dir()
    rd.mkdir(parents=True, exist_ok=True)
    stamp = f"# config_hash={exp.config_hash()} code_version={__version__} seeds={','.join(map(str, exp.seeds))}\n"
    rows = [(_labels(t, c), rs, rep) for (t, c), (rs, rep) in groups.items()]
    bio.atomic_write(rd / "eval.csv", stamp + reports_to_csv(rows))
    bio.atomic_write(rd / "eval.json", results_to_json(results))
    bio.atomic_write(rd / "comparison.csv", stamp + comparison_table(exp, groups))
    bio.atomic_write(rd / "resolved_config.yaml", yaml.safe_dump(exp.resolved(), sort_keys=True))
    bio.write_json(rd / "manifest.json", {"config_hash": exp.config_hash(), "code_version": __version__,
                                          "written_unix": time.time()})
    return rd


def _diverged_exit(groups) -> int:
    dead = [k for k, (_, rep) in groups.items() if rep is None]
    partial = [k for k, (rs, rep) in groups.items() if rep is not None and rep.n_diverged]
    for t, c in partial:
        print(f"warning: {t} {c.slug}: {groups[(t, c)][1].n_diverged} seed(s) diverged, excluded", file=sys.stderr)
    for t, c in dead:
        print(f"warning: {t} {c.slug}: all seeds diverged", file=sys.stderr)
    return EXIT_DIVERGED if dead else EXIT_OK


# commands ---------------------------------------------------------------


ABLATION_CELLS = [Cell("seq-bim", "full"), Cell("seq-bim", "xproj-only"), Cell("seq-bim", "bcoup-only"),
                  Cell("coupled")]
_ROUTE_INPUTS = {"full": ("x_mod", "x_mod"), "xproj-only": ("x_mod", "x_t"), "bcoup-only": ("x_t", "x_mod")}


def sweep_cells(cfg: dict, axis: str, contexts=None, d_states=None) -> list[Cell]:
    sw = cfg.get("sweep") or {}
    variants = cfg.get("variants") or ALL_VARIANTS
    model = cfg.get("model") or {}
    if axis == "param-matched":
        return [replace(c, context=model.get("context") or 50) for c in PARAM_MATCHED]
    contexts = _parse_list(contexts, int) or sw.get("contexts")
    d_states = _parse_list(d_states, int) or sw.get("d_states")
    if axis == "L" and not contexts:
        raise ConfigError("L sweep needs --contexts")
    if axis == "ds" and not d_states:
        raise ConfigError("d_s sweep needs --d-states")
    contexts = contexts or [model.get("context") or 50]
    d_states = d_states or [model.get("d_state") or 8]
    return [Cell(v, "full", ds, model.get("d_inner"), L) for L in contexts for ds in d_states for v in variants]


def experiment_from_args(args, mode: str | None = None) -> tuple[Experiment, str | None]:
    """Resolve config and pick the model grid; ``mode`` is None, "sweep" or "ablation"."""
    cfg, name = load_config(args)
    if mode is None:
        mode = "ablation" if cfg.get("ablation") else ("sweep" if cfg.get("sweep") else None)
    cells = None
    axis = None
    if mode is not None and cfg.get("cells"):
        raise ConfigError(f"an explicit cells list cannot be combined with the {mode} grid")
    if mode == "ablation":
        model = cfg.get("model") or {}
        cells = [replace(c, d_state=model.get("d_state") or 8, d_inner=model.get("d_inner"),
                         context=model.get("context") or 50) for c in ABLATION_CELLS]
        if not (cfg.get("tasks") or cfg.get("task")):
            cfg["tasks"] = list(TASKS)
        name = name or "ablation"
    elif mode == "sweep":
        axis = getattr(args, "axis", None) or (cfg.get("sweep") or {}).get("axis")
        if axis not in ("L", "ds", "param-matched"):
            raise ConfigError("sweep axis must be L, ds or param-matched")
        cells = sweep_cells(cfg, axis, getattr(args, "contexts", None), getattr(args, "d_states", None))
        name = name or f"sweep-{axis}"
    exp = build_experiment(cfg, name, cells)
    return exp, (("ablation" if mode == "ablation" else axis) if mode else None)


def _write_table(exp: Experiment, filename: str, table: str) -> None:
    bio.atomic_write(exp.report_dir() / filename,
                     f"# config_hash={exp.config_hash()} code_version={__version__}\n" + table)
    print(table, end="")


def _evaluate_and_report(exp: Experiment, layout: str | None) -> int:
    results = eval_all(exp)
    groups = group_reports(exp, results)
    rd = write_reports(exp, results, groups)
    print(_strip_comments((rd / "comparison.csv").read_text()), end="")
    if layout == "ablation":
        _write_table(exp, "ablation.csv", ablation_table(exp, groups))
    elif layout is not None:
        _write_table(exp, "sweep.csv", sweep_table(exp, groups, layout))
    print(f"reports in {rd}")
    return _diverged_exit(groups)


def cmd_gen_data(args) -> int:
    exp, _ = experiment_from_args(args)
    for t in exp.tasks:
        ensure_data(exp, t, args.force)
    return EXIT_OK


def cmd_train(args) -> int:
    exp, _ = experiment_from_args(args)
    for t in exp.tasks:
        require_data(exp, t)
    out = train_all(exp, args.force)
    by_cell: dict = {}
    for (t, c, _), r in zip(_jobs(exp), out):
        by_cell.setdefault((t, c), []).append(r["diverged"])
    n_div = sum(sum(v) for v in by_cell.values())
    if n_div:
        print(f"warning: {n_div} run(s) diverged; see train_log.csv of each", file=sys.stderr)
    return EXIT_DIVERGED if any(all(v) for v in by_cell.values()) else EXIT_OK


def cmd_eval(args) -> int:
    exp, layout = experiment_from_args(args)
    for t in exp.tasks:
        require_data(exp, t)
    return _evaluate_and_report(exp, layout)


def _pipeline(exp: Experiment, layout, force: bool) -> int:
    for t in exp.tasks:
        ensure_data(exp, t)
    train_all(exp, force)
    return _evaluate_and_report(exp, layout)


def cmd_run(args) -> int:
    """gen-data, train and eval in one go."""
    exp, layout = experiment_from_args(args)
    return _pipeline(exp, layout, args.force)


def cmd_sweep(args) -> int:
    exp, axis = experiment_from_args(args, "sweep")
    return _pipeline(exp, axis, args.force)


def cmd_ablate(args) -> int:
    exp, _ = experiment_from_args(args, "ablation")
    return _pipeline(exp, "ablation", args.force)


def sweep_table(exp: Experiment, groups, axis: str) -> str:
    """Median AR MSE: rows (task, L, d_s) by variant, or one row per parameter-matched model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if axis == "param-matched":
        w.writerow(["task", "model", "d_state", "d_inner", "params", "median", "mean", "convergent"])
        for (t, c), (rs, rep) in groups.items():
            spec = c.spec(t)
            w.writerow([t, spec.variant.label, c.d_state, spec.dims.d_i, count_params(spec.variant, spec.dims),
                        "diverged" if rep is None else _fmt(rep.median),
                        "" if rep is None else _fmt(rep.mean), 0 if rep is None else rep.n_convergent])
        return buf.getvalue()
    variants = list(dict.fromkeys(c.variant for c in exp.cells))
    w.writerow(["task", "context", "d_state"] + [Variant(v).label for v in variants])
    for t, L, ds in dict.fromkeys((t, c.context, c.d_state) for t, c in groups):
        row = [t, L, ds]
        for v in variants:
            hit = [rep for (tt, c), (_, rep) in groups.items()
                   if (tt, c.context, c.d_state, c.variant) == (t, L, ds, v)]
            row.append("" if not hit else ("diverged" if hit[0] is None else _fmt(hit[0].median)))
        w.writerow(row)
    return buf.getvalue()


def ablation_table(exp: Experiment, groups) -> str:
    """Rows: full / xproj-only / bcoup-only / Coupled; mean and median AR MSE per task."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "xproj_input", "bcoup_input"] + [f"{t}_mean" for t in exp.tasks]
               + [f"{t}_median" for t in exp.tasks])
    for c in exp.cells:
        label = "Coupled" if c.variant == "coupled" else ("seq-BIM (full)" if c.routing == "full" else c.routing)
        ins = _ROUTE_INPUTS[c.routing] if c.variant == "seq-bim" else ("x_t", "x_t")
        reps = [groups[(t, c)][1] for t in exp.tasks]
        w.writerow([label, *ins] + ["diverged" if r is None else _fmt(r.mean) for r in reps]
                   + ["diverged" if r is None else _fmt(r.median) for r in reps])
    return buf.getvalue()


def _gc_loss(spec: ModelSpec, params: dict, x: np.ndarray, target: np.ndarray):
    def f(p):
        out = spec.forward(p, x)
        err = out - target
        return (err * err).sum()

    return f


def cmd_grad_check(args) -> int:
    from .train import init_params

    variants = _parse_list(args.variant) or ALL_VARIANTS
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    ok = True
    for v in variants:
        routings = [r.value for r in Routing] if v == "seq-bim" else ["full"]
        for r in routings:
            spec = ModelSpec(Variant(v), ModelDims(2, args.d_state, args.d_inner, args.context), Routing(r))
            params = init_params(spec, seed=args.seed, bilinear_std=0.5)
            x = rng.normal(size=(2, args.context, 2))
            target = rng.normal(size=(2, args.context, 2))
            rep = grad_check(_gc_loss(spec, params, x, target), params, tolerance=args.tolerance)
            worst = max(worst, rep.max_error)
            ok &= rep.ok
            print(f"{v:8s} {r:11s} max rel err {rep.max_error:.2e} {'ok' if rep.ok else 'FAIL ' + str(rep.failures)}")
    print(f"worst {worst:.2e} (tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_scan_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = {"diagonal": 0.0, "matrix": 0.0}
    d_states, lengths = (1, 3, 8, 16), (1, 2, 7, 64, 257)
    for kind in worst:
        for i in range(args.cases):
            n, L = d_states[i % 4], lengths[(i // 4) % 5]
            b = rng.normal(size=(L, n))
            g = rng.uniform(-1, 1, (L, n)) if kind == "diagonal" else rng.normal(size=(L, n, n)) / math.sqrt(n)
            h0 = rng.normal(size=n)
            for layout in ("blelloch", "doubling"):
                d = np.max(np.abs(parallel_scan((g, b), h0, layout).value - sequential_scan((g, b), h0).value))
                worst[kind] = max(worst[kind], float(d))
    for kind, v in worst.items():
        print(f"{kind:8s} {args.cases} cases, max |parallel - sequential| = {v:.3e}")
    return EXIT_OK if max(worst.values()) < args.tolerance else EXIT_CHECK


# argument parsing -------------------------------------------------------


def _experiment_args(p: argparse.ArgumentParser, force: bool = True) -> None:
    p.add_argument("--config", help="YAML experiment file")
    p.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}")
    p.add_argument("--task", help="input-delay, narma10 or a comma list")
    p.add_argument("--variant", help="variant name or comma list")
    p.add_argument("--routing", choices=[r.value for r in Routing])
    p.add_argument("--seeds", help="comma list or range like 0..2")
    p.add_argument("--desk-scale", action="store_true", help="20K iterations, batch 64, 8K/1K/100 trajectories")
    p.add_argument("--d-state", type=int)
    p.add_argument("--d-inner", type=int)
    p.add_argument("--context", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--bilinear-init-std", type=float)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--method", choices=["scan", "sequential", "loop"])
    p.add_argument("--counts", help="train,test,rollout trajectory counts")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--rollout-total", type=int)
    p.add_argument("--rollout-count", type=int)
    p.add_argument("--feedback", choices=["state", "all"])
    p.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    p.add_argument("--output", help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    p.add_argument("--name", help="report directory name")
    if force:
        p.add_argument("--force", action="store_true", help="redo work whose outputs already exist")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bssm", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate dataset splits")
    _experiment_args(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train every (model, seed) of an experiment")
    _experiment_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AR-rollout evaluation of trained checkpoints")
    _experiment_args(p, force=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="gen-data + train + eval")
    _experiment_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over context length, state size or parameter-matched models")
    _experiment_args(p)
    p.add_argument("--axis", choices=["L", "ds", "param-matched"])
    p.add_argument("--contexts", help="context lengths, e.g. 25,50,75,100")
    p.add_argument("--d-states", help="state sizes, e.g. 8,16")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="seq-BIM pathway ablation")
    _experiment_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="tape gradients vs central differences")
    p.add_argument("--variant")
    p.add_argument("--d-state", type=int, default=3)
    p.add_argument("--d-inner", type=int, default=4)
    p.add_argument("--context", type=int, default=6)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("scan-check", help="parallel vs sequential scan on random elements")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_scan_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, bio.ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ResampleBudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
