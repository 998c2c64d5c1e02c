"""Binary containers for datasets and checkpoints, plus small file helpers.

Layout: 8-byte magic, little-endian ``uint16`` format version, ``uint32``
header length, a UTF-8 JSON header, then the arrays listed in
``header["arrays"]`` as little-endian float64 in that order (row-major).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .tasks import Dataset, TrajectorySet, config_hash, dataset_description, get_task

FORMAT_VERSION = 1
DATASET_MAGIC = b"BSSMDATA"
CHECKPOINT_MAGIC = b"BSSMCKPT"


class ContainerError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def pack(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    head = json.dumps(header, sort_keys=True).encode()
    parts = [magic, struct.pack("<HI", FORMAT_VERSION, len(head)), head]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values()]
    return b"".join(parts)


def unpack(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != magic:
        raise ContainerError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<HI", blob, 8)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")
    start = 14
    header = json.loads(blob[start : start + hlen])
    pos = start + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise ContainerError("trailing bytes after last array")
    return header, arrays


# datasets ---------------------------------------------------------------


def save_dataset(ds: Dataset, directory) -> dict:
    """Write ``<split>.bin`` for each split and ``manifest.json``; returns the manifest."""
    directory = Path(directory)
    desc = dataset_description(ds)
    chash = config_hash(desc)
    spec = get_task(ds.task)
    for split, s in ds.splits().items():
        header = {
            "kind": "dataset",
            "task": ds.task,
            "task_id": spec.code,
            "split": split,
            "config_hash": chash,
            "count": len(s),
            "length": s.length,
            "channels": list(spec.channels),
            "input_channel": s.input_channel,
            "redraws": s.attempts,
        }
        atomic_write(directory / f"{split}.bin", pack(DATASET_MAGIC, header, {"series": s.series}))
    manifest = dict(desc, config_hash=chash, files={k: f"{k}.bin" for k in ds.splits()}, meta=ds.meta)
    write_json(directory / "manifest.json", manifest)
    return manifest


def load_split(path) -> tuple[dict, TrajectorySet]:
    header, arrays = unpack(Path(path).read_bytes(), DATASET_MAGIC)
    return header, TrajectorySet(arrays["series"], header["input_channel"], header.get("redraws", 0))


def load_dataset(directory) -> Dataset:
    from .tasks import NarmaConfig, PendulumConfig

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    sets = {}
    for split, fname in manifest["files"].items():
        header, sets[split] = load_split(directory / fname)
        if header["config_hash"] != manifest["config_hash"]:
            raise ContainerError(f"{fname} does not belong to this manifest")
    cfg_cls = PendulumConfig if manifest["task"] == "input-delay" else NarmaConfig
    cfg = dict(manifest["config"])
    if "coefficients" in cfg:
        cfg["coefficients"] = tuple(cfg["coefficients"])
    return Dataset(manifest["task"], cfg_cls(**cfg), manifest["seed"], meta=manifest.get("meta", {}), **sets)


# checkpoints ------------------------------------------------------------


def save_checkpoint(path, params: dict, header: dict) -> None:
    header = dict(header, kind="checkpoint")
    atomic_write(path, pack(CHECKPOINT_MAGIC, header, {k: np.asarray(v) for k, v in params.items()}))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes(), CHECKPOINT_MAGIC)
