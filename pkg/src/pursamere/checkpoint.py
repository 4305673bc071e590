"""JSON checkpoints for dense networks (score models and classifiers)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import DenseLayer

VERSION = 1


def layers_to_dict(layers: list[DenseLayer]) -> list[dict]:
    return [{"w": layer.weight.tolist(), "b": layer.bias.tolist()} for layer in layers]


def layers_from_dict(items: list[dict]) -> list[DenseLayer]:
    layers = [DenseLayer(np.array(it["w"], dtype=np.float64), np.array(it["b"], dtype=np.float64)) for it in items]
    for a, b in zip(layers, layers[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
    return layers


def dims_of(layers: list[DenseLayer]) -> list[int]:
    return [layers[0].in_dim] + [layer.out_dim for layer in layers]


def write_json(path, payload: dict) -> None:
    # repr round-trips float64 exactly, which json.dumps uses for floats
    Path(path).write_text(json.dumps(payload, indent=1))


def read_json(path) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    return payload
