"""Versioned JSON checkpoints.

Layout: ``{"format_version", "config", "parameters": {name: {"shape", "values"}}}``
plus any extra top-level keys supplied by the caller. Python's float repr
round-trips float64 exactly, so save -> load is lossless.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .tensor import Parameter

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def params_to_dict(params: Iterable[Parameter]) -> dict[str, dict[str, Any]]:
    out = {}
    for p in params:
        if p.name in out:
            raise CheckpointError(f"duplicate parameter name {p.name!r}")
        out[p.name] = {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
    return out


def save_checkpoint(path, config: dict, params: Iterable[Parameter], **extra) -> None:
    payload = {"format_version": FORMAT_VERSION, "config": config, "parameters": params_to_dict(params)}
    payload.update(extra)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, Any]:
    """Read a checkpoint; parameter values come back as float64 arrays."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format_version {version!r}, expected {FORMAT_VERSION}"
        )
    for key in ("config", "parameters"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} lacks {key!r}")
    arrays = {}
    for name, rec in payload["parameters"].items():
        arr = np.asarray(rec["values"], dtype=np.float64)
        shape = tuple(rec["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"parameter {name!r}: {arr.size} values for shape {shape}")
        arrays[name] = arr.reshape(shape)
    payload["parameters"] = arrays
    return payload


def assign_parameters(params: Iterable[Parameter], arrays: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {p.name!r}")
        value = arrays[p.name]
        if value.shape != p.shape:
            raise CheckpointError(f"parameter {p.name!r}: shape {value.shape} != {p.shape}")
        p.data[...] = value
