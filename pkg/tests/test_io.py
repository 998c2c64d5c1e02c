import json
import struct

import numpy as np
import pytest

from bilinear_ssm.io import (
    CHECKPOINT_MAGIC, DATASET_MAGIC, ContainerError, atomic_write, load_checkpoint, load_dataset, load_split, pack,
    save_checkpoint, save_dataset, unpack, write_json,
)
from bilinear_ssm.tasks import build_dataset


def test_pack_round_trip(rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "c": np.zeros((0, 2))}
    header, out = unpack(pack(CHECKPOINT_MAGIC, {"x": 1}, arrays), CHECKPOINT_MAGIC)
    assert header["x"] == 1
    for k, v in arrays.items():
        np.testing.assert_array_equal(out[k], v)
        assert out[k].dtype == np.float64


def test_layout_is_little_endian_float64():
    blob = pack(DATASET_MAGIC, {}, {"v": np.array([1.5, -2.0])})
    assert blob[:8] == DATASET_MAGIC
    version, hlen = struct.unpack_from("<HI", blob, 8)
    assert version == 1
    assert blob[14 + hlen:] == np.array([1.5, -2.0], dtype="<f8").tobytes()


def test_corrupt_containers_are_rejected():
    blob = pack(DATASET_MAGIC, {}, {"v": np.ones(3)})
    with pytest.raises(ContainerError):
        unpack(blob, CHECKPOINT_MAGIC)
    with pytest.raises(ContainerError):
        unpack(blob + b"\0" * 8, DATASET_MAGIC)
    bad_version = blob[:8] + struct.pack("<H", 99) + blob[10:]
    with pytest.raises(ContainerError):
        unpack(bad_version, DATASET_MAGIC)


@pytest.mark.parametrize("task", ["input-delay", "narma10"])
def test_dataset_round_trip(task, tmp_path):
    ds = build_dataset(task, (6, 3, 2), (20, 20, 40), seed=4)
    manifest = save_dataset(ds, tmp_path)
    assert manifest["counts"] == [6, 3, 2] and manifest["seed"] == 4
    assert json.loads((tmp_path / "manifest.json").read_text())["config_hash"] == manifest["config_hash"]
    back = load_dataset(tmp_path)
    assert back.task == task and back.config == ds.config
    for a, b in zip(ds.splits().values(), back.splits().values()):
        assert a.series.tobytes() == b.series.tobytes()
    header, split = load_split(tmp_path / "rollout.bin")
    assert header["count"] == 2 and header["length"] == 40 and header["task"] == task


def test_mixed_dataset_files_are_detected(tmp_path):
    save_dataset(build_dataset("narma10", (4, 2, 2), (10, 10, 20), seed=0), tmp_path / "a")
    save_dataset(build_dataset("narma10", (4, 2, 2), (10, 10, 20), seed=1), tmp_path / "b")
    (tmp_path / "a" / "test.bin").write_bytes((tmp_path / "b" / "test.bin").read_bytes())
    with pytest.raises(ContainerError):
        load_dataset(tmp_path / "a")


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"W": rng.normal(size=(2, 3)), "b": rng.normal(size=3)}
    save_checkpoint(tmp_path / "ck.bin", params, {"variant": "gm", "iteration": 5})
    header, back = load_checkpoint(tmp_path / "ck.bin")
    assert header["kind"] == "checkpoint" and header["iteration"] == 5
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "d" / "x.txt", "hello")
    write_json(tmp_path / "d" / "y.json", {"b": 1, "a": 2})
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["x.txt", "y.json"]
    assert (tmp_path / "d" / "y.json").read_text().index('"a"') < (tmp_path / "d" / "y.json").read_text().index('"b"')
