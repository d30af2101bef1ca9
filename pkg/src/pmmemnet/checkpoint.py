"""Self-describing checkpoint container (magic "PMMN1").

Layout: magic line, a little-endian uint64 header length, a JSON header
(config, pattern hash, Adam step, extras, array manifest), then raw
little-endian float64 blobs in manifest order. Trainable entries carry
three blobs (values, Adam m, Adam v); state entries carry one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .model import ForecastModel, ModelConfig

_MAGIC = b"PMMN1\n"


@dataclass
class Checkpoint:
    config: dict
    pattern_hash: str
    state_dict: dict
    extra: dict


def save_checkpoint(path, model: ForecastModel, extra: dict | None = None) -> None:
    sd = model.store.state_dict()
    manifest = [
        {"name": n, "shape": list(a.shape), "kind": "param"} for n, a in sd["params"].items()
    ] + [
        {"name": n, "shape": list(a.shape), "kind": "state"} for n, a in sd["state"].items()
    ]
    header = {
        "config": {**model.config.to_dict(), "num_nodes": model.num_nodes},
        "pattern_hash": model.pattern_hash,
        "adam_step": sd["step"],
        "extra": extra or {},
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for entry in manifest:
            name = entry["name"]
            if entry["kind"] == "param":
                for part in (sd["params"][name], sd["m"][name], sd["v"][name]):
                    fh.write(np.ascontiguousarray(part, dtype="<f8").tobytes())
            else:
                fh.write(np.ascontiguousarray(sd["state"][name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a PMMN1 checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params, state, m, v = {}, {}, {}, {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            if entry["kind"] == "param":
                parts = []
                for _ in range(3):
                    parts.append(
                        np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64).reshape(shape)
                    )
                params[entry["name"]], m[entry["name"]], v[entry["name"]] = parts
            else:
                state[entry["name"]] = (
                    np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64).reshape(shape)
                )
    return Checkpoint(
        config=header["config"],
        pattern_hash=header["pattern_hash"],
        state_dict={"params": params, "state": state, "m": m, "v": v, "step": header["adam_step"]},
        extra=header.get("extra", {}),
    )


def restore_model(ckpt: Checkpoint, graph, patterns) -> ForecastModel:
    """Rebuild a model from a checkpoint; the bank hash must match."""
    if ckpt.pattern_hash != patterns.content_hash:
        raise ValueError(
            "pattern bank hash mismatch: checkpoint was trained against a different bank"
        )
    n = int(ckpt.config["num_nodes"])
    if graph.num_nodes != n:
        raise ValueError(f"checkpoint expects {n} nodes, graph has {graph.num_nodes}")
    model = ForecastModel(ModelConfig.from_dict(ckpt.config), graph, patterns)
    model.store.load_state_dict(ckpt.state_dict)
    return model
