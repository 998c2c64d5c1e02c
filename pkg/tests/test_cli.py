import json
from pathlib import Path

import pytest
import yaml

from bilinear_ssm import io as bio
from bilinear_ssm.cli import PARAM_MATCHED, PRESETS, build_experiment, main
from bilinear_ssm.ssm_core import ModelDims, Variant, count_params

TINY = ["--counts", "4,2,2", "--iterations", "3", "--batch-size", "2", "--context", "8",
        "--d-state", "3", "--d-inner", "4", "--rollout-total", "60", "--workers", "1"]


def run(tmp_path, *argv):
    return main([*argv, "--output", str(tmp_path), *TINY])


def _body(path: Path) -> str:
    return "".join(l for l in path.read_text().splitlines(keepends=True) if not l.startswith("#"))


def test_gm_with_routing_is_a_config_error(tmp_path, capsys):
    code = run(tmp_path, "train", "--task", "narma10", "--variant", "gm", "--routing", "bcoup-only")
    assert code == 2
    assert "seq-bim" in capsys.readouterr().err.lower()
    assert not (tmp_path / "runs").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--task", "nope"],
    ["train", "--task", "narma10", "--variant", "mamba"],
    ["train", "--task", "narma10", "--seeds", "0,0"],
    ["train", "--preset", "table99"],
])
def test_invalid_configs_exit_2(tmp_path, argv):
    assert run(tmp_path, *argv) == 2


def test_unknown_yaml_key_rejected(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({"task": "narma10", "learning_rate": 1.0}))
    assert run(tmp_path, "gen-data", "--config", str(cfg)) == 2


def test_missing_dataset_exits_3(tmp_path, capsys):
    assert run(tmp_path, "train", "--task", "narma10", "--variant", "standard") == 3
    assert "gen-data" in capsys.readouterr().err


def test_missing_checkpoint_exits_3(tmp_path):
    assert run(tmp_path, "gen-data", "--task", "narma10") == 0
    assert run(tmp_path, "eval", "--task", "narma10", "--variant", "standard") == 3


def test_missing_config_file_exits_3(tmp_path):
    assert run(tmp_path, "gen-data", "--config", str(tmp_path / "absent.yaml")) == 3


def test_gen_data_is_idempotent(tmp_path, capsys):
    assert run(tmp_path, "gen-data", "--task", "narma10") == 0
    first = capsys.readouterr().out
    assert "wrote 4/2/2" in first
    (d,) = (tmp_path / "data").iterdir()
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["config_hash"]
    assert run(tmp_path, "gen-data", "--task", "narma10") == 0
    assert "exists, skipped" in capsys.readouterr().out
    assert run(tmp_path, "gen-data", "--task", "narma10", "--force") == 0
    assert "wrote" in capsys.readouterr().out


def test_desk_scale_counts():
    preset = PRESETS["table3-desk"]
    assert preset["desk_scale"] and preset["seeds"] == [0, 1, 2]
    exp = build_experiment({"task": "narma10", "desk_scale": True}, "x")
    assert exp.counts == (8000, 1000, 100)
    assert exp.train.iterations == 20_000 and exp.train.batch_size == 64
    full = build_experiment({"task": "narma10"}, "x")
    assert full.counts == (66_000, 5_000, 100)


def test_train_writes_one_checkpoint_per_seed(tmp_path):
    assert run(tmp_path, "gen-data", "--task", "input-delay") == 0
    assert run(tmp_path, "train", "--task", "input-delay", "--variant", "seq-bim", "--seeds", "0..2") == 0
    seeds = sorted(p.parent.name for p in (tmp_path / "runs").rglob("checkpoint.bin"))
    assert seeds == ["seed0", "seed1", "seed2"]
    for ckpt in (tmp_path / "runs").rglob("checkpoint.bin"):
        header, params = bio.load_checkpoint(ckpt)
        assert header["variant"] == "seq-bim" and header["config_hash"]
        log_text = (ckpt.parent / "train_log.csv").read_text()
        assert log_text.startswith(f"# config_hash={header['config_hash']}")
        assert f"seed={header['seed']}" in log_text.splitlines()[0]


def test_run_is_reproducible_byte_for_byte(tmp_path, capsys):
    argv = ["run", "--task", "narma10", "--variant", "standard,coupled", "--seeds", "0,1", "--name", "rep"]
    assert run(tmp_path, *argv) == 0
    rd = tmp_path / "reports" / "rep"
    first = {f: (rd / f).read_bytes() for f in ("eval.csv", "eval.json", "comparison.csv")}
    assert run(tmp_path, "eval", *argv[1:]) == 0
    assert {f: (rd / f).read_bytes() for f in first} == first
    # a fresh output root retrains from scratch and still lands on the same bytes
    other = tmp_path / "again"
    assert main([*argv, "--output", str(other), *TINY]) == 0
    for f in first:
        assert _body(other / "reports" / "rep" / f) == _body(rd / f)


def test_eval_outputs_layout(tmp_path):
    argv = ["run", "--task", "narma10", "--variant", "standard,gm", "--seeds", "3", "--name", "one"]
    assert run(tmp_path, *argv) == 0
    rd = tmp_path / "reports" / "one"
    header = (rd / "eval.csv").read_text().splitlines()[0]
    assert header.startswith("# config_hash=") and "code_version=" in header and "seeds=3" in header
    comp = _body(rd / "comparison.csv").splitlines()
    assert comp[0] == "task,model,params,mean,median,worst,sd,impr_mean,impr_median,convergent,seeds"
    assert [r.split(",")[1] for r in comp[1:]] == ["Standard", "GM"]
    results = json.loads((rd / "eval.json").read_text())
    (std,) = [v for k, v in results.items() if "/standard/" in k]
    agg = [r for r in _body(rd / "eval.csv").splitlines() if r.startswith("narma10,standard") and "aggregate" in r]
    cells = agg[0].split(",")
    # a single seed: every statistic equals the seed value and the SD column is empty
    assert float(cells[8]) == float(cells[9]) == float(cells[10]) == std["ar_mse"]
    assert cells[11] == ""
    resolved = yaml.safe_load((rd / "resolved_config.yaml").read_text())
    assert resolved["seeds"] == [3] and resolved["train"]["iterations"] == 3


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("BSSM_OUTPUT_ROOT", str(tmp_path / "envroot"))
    assert main(["gen-data", "--task", "narma10", *TINY]) == 0
    assert any((tmp_path / "envroot" / "data").iterdir())


def test_sweep_grid_shape(tmp_path):
    code = run(tmp_path, "sweep", "--task", "narma10", "--axis", "L", "--contexts", "25,50", "--d-states", "8",
               "--variant", "standard,seq-bim", "--name", "sw")
    assert code == 0
    rows = _body(tmp_path / "reports" / "sw" / "sweep.csv").splitlines()
    assert rows[0] == "task,context,d_state,Standard,seq-BIM"
    assert [r.split(",")[:3] for r in rows[1:]] == [["narma10", "25", "8"], ["narma10", "50", "8"]]


def test_sweep_needs_axis_values(tmp_path):
    assert run(tmp_path, "sweep", "--task", "narma10", "--axis", "L") == 2


def test_param_matched_cells():
    cells = {(c.variant, c.d_state, c.d_inner) for c in PARAM_MATCHED}
    assert ("coupled", 24, None) in cells and ("gm", 16, None) in cells
    assert ("coupled", 16, 12) in cells
    target = count_params(Variant.SEQ_BIM, ModelDims(2, 16))
    for c in PARAM_MATCHED:
        n = count_params(Variant(c.variant), ModelDims(2, c.d_state, c.d_inner))
        assert abs(n - target) / target < 0.25


def test_ablation_layout(tmp_path):
    code = run(tmp_path, "ablate", "--task", "input-delay,narma10", "--seeds", "0", "--name", "abl")
    assert code == 0
    rows = _body(tmp_path / "reports" / "abl" / "ablation.csv").splitlines()
    assert rows[0] == ("model,xproj_input,bcoup_input,input-delay_mean,narma10_mean,"
                       "input-delay_median,narma10_median")
    assert [r.split(",")[:3] for r in rows[1:]] == [
        ["seq-BIM (full)", "x_mod", "x_mod"],
        ["xproj-only", "x_mod", "x_t"],
        ["bcoup-only", "x_t", "x_mod"],
        ["Coupled", "x_t", "x_t"],
    ]


def test_all_seeds_diverged_exits_4(tmp_path, capsys):
    # a huge learning rate blows up the weights within a few steps
    cfg = tmp_path / "hot.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"lr_start": 1e6, "lr_end": 1e6}}))
    code = run(tmp_path, "run", "--config", str(cfg), "--task", "narma10", "--variant", "p-bim",
               "--bilinear-init-std", "5", "--name", "hot")
    err = capsys.readouterr().err
    assert code == 4, err
    assert "all seeds diverged" in err
    comp = _body(tmp_path / "reports" / "hot" / "comparison.csv").splitlines()
    assert "diverged" in comp[1]


def test_grad_check_and_scan_check_pass(capsys):
    assert main(["grad-check", "--variant", "gm,seq-bim"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 4  # gm plus seq-bim under three routings
    assert main(["scan-check", "--cases", "20"]) == 0


def test_scan_check_reports_failure_on_impossible_tolerance():
    assert main(["scan-check", "--cases", "4", "--tolerance", "0"]) == 1


def test_version_flag(capsys):
    assert main(["--version"]) == 0


def test_cells_list_conflicts_with_grid(tmp_path):
    cfg = tmp_path / "grid.yaml"
    cfg.write_text(yaml.safe_dump({"task": "narma10", "cells": [{"variant": "gm"}], "ablation": True}))
    assert run(tmp_path, "run", "--config", str(cfg)) == 2


def test_explicit_cells_from_yaml(tmp_path):
    cfg = tmp_path / "cells.yaml"
    cfg.write_text(yaml.safe_dump({"task": "narma10", "cells": [{"variant": "coupled", "d_state": 5}]}))
    assert run(tmp_path, "gen-data", "--config", str(cfg)) == 0
    assert run(tmp_path, "train", "--config", str(cfg)) == 0
    (run_dir,) = (tmp_path / "runs" / "narma10").iterdir()
    assert run_dir.name.startswith("coupled-full-ds5-L50")
