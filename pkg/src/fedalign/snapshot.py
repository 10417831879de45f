"""Model snapshots: ``uint64 LE header length | JSON header | float64 LE values``."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn_core import ModelDims, TwoTowerModel

MAGIC = "fedalign-model/1"


def _header(model: TwoTowerModel) -> bytes:
    header = {
        "format": MAGIC,
        "dims": model.dims.to_dict(),
        "n_params": int(model.values.size),
        "layout": [{"name": s.name, "group": s.group, "offset": s.offset, "shape": list(s.shape)} for s in model.layout],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_model(model: TwoTowerModel, path: str | Path) -> Path:
    path = Path(path)
    header = _header(model)
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(model.values.astype("<f8").tobytes())
    return path


def load_model(path: str | Path) -> TwoTowerModel:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated snapshot")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: unreadable snapshot header") from exc
    if header.get("format") != MAGIC:
        raise ValueError(f"{path}: not a model snapshot")
    values = np.frombuffer(data[8 + n :], dtype="<f8").astype(np.float64)
    model = TwoTowerModel(ModelDims(**header["dims"]), values)
    stored = [(s["name"], s["offset"], tuple(s["shape"])) for s in header["layout"]]
    if stored != [(s.name, s.offset, s.shape) for s in model.layout]:
        raise ValueError(f"{path}: layout header does not match the model dimensions")
    return model
