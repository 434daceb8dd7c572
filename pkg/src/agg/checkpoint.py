"""Versioned single-file checkpoints.

Layout (little-endian)::

    b"AGGCKPT1" | uint64 header length | UTF-8 JSON header | float64 payload

The JSON header holds configs, standardization statistics, vocabularies and a
table of (name, shape, offset) entries locating every tensor in the payload.
Parameters are written under ``param/<name>``; ADAM moments under
``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from agg.errors import CheckpointError
from agg.model import AGG, ModelConfig
from agg.numerics.optim import AdamState
from agg.numerics.tensor import ParameterStore
from agg.pipeline import Schema, Stats, Vocabulary

MAGIC = b"AGGCKPT1"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    stats: Stats | None = None
    vocabs: list[Vocabulary] = field(default_factory=list)
    schema: Schema | None = None
    extra: dict = field(default_factory=dict)

    def model(self) -> AGG:
        store = AGG(self.model_config).params
        store.load_state(self.params)
        return AGG(self.model_config, store)

    @classmethod
    def from_model(cls, model: AGG, **kw) -> "Checkpoint":
        return cls(model.config, model.params.state(), **kw)


def _schema_dict(schema: Schema | None):
    if schema is None:
        return None
    return {"time": schema.time, "discrete": list(schema.discrete),
            "continuous": list(schema.continuous), "measurements": list(schema.measurements),
            "series": schema.series, "label": schema.label}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    for k in sorted(ckpt.adam.m):
        tensors.append((f"adam_m/{k}", ckpt.adam.m[k]))
        tensors.append((f"adam_v/{k}", ckpt.adam.v[k]))
    table, chunks, offset = [], [], 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.size
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "adam": {"beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
                 "t": ckpt.adam.t},
        "stats": None if ckpt.stats is None else ckpt.stats.to_dict(),
        "vocabs": [{"name": v.name, "tokens": list(v.tokens)} for v in ckpt.vocabs],
        "schema": _schema_dict(ckpt.schema),
        "extra": ckpt.extra,
        "tensors": table,
        "payload_values": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    payload = raw[start + hlen:]
    n_values = header["payload_values"]
    if len(payload) != 8 * n_values:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, expected {8 * n_values}")
    values = np.frombuffer(payload, dtype="<f8")
    params, m, v = {}, {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = values[entry["offset"]:entry["offset"] + size].astype(np.float64).reshape(shape)
        kind, name = entry["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][name] = arr
    a = header["adam"]
    schema = header.get("schema")
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=params,
        adam=AdamState(a["beta1"], a["beta2"], a["eps"], a["t"], m, v),
        stats=None if header["stats"] is None else Stats.from_dict(header["stats"]),
        vocabs=[Vocabulary(d["name"], list(d["tokens"])) for d in header["vocabs"]],
        schema=None if schema is None else Schema(schema["time"], tuple(schema["discrete"]),
                                                  tuple(schema["continuous"]),
                                                  tuple(schema["measurements"]), schema["series"],
                                                  schema["label"]),
        extra=header.get("extra", {}),
    )


def params_equal(a: ParameterStore | dict, b: ParameterStore | dict) -> bool:
    sa = a.state() if isinstance(a, ParameterStore) else a
    sb = b.state() if isinstance(b, ParameterStore) else b
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)
