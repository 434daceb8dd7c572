"""Flat ``key = value`` run configuration shared by the command-line tools.

One file covers the pipeline, model and training settings. Keys that exist in
more than one section (``seed``, ``batch_size``, ``context_length``) set all
of them. Model widths that follow from the data (``d_y``, vocabulary sizes,
number of continuous features) are not configurable.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from agg.errors import ConfigurationError
from agg.model import ModelConfig
from agg.pipeline import PipelineConfig, read_key_values
from agg.training import TrainConfig

DATA_DERIVED = frozenset({"d_y", "vocab_sizes", "n_continuous", "discrete_names", "task"})
RUN_KEYS = {"data": None, "schema": None}


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in DATA_DERIVED}


SECTIONS = {"pipeline": PipelineConfig, "model": ModelConfig, "train": TrainConfig}


def known_keys() -> list[str]:
    keys = set(RUN_KEYS)
    for cls in SECTIONS.values():
        keys.update(_fields(cls))
    return sorted(keys)


def _parse_value(key: str, text: str, annotation) -> Any:
    hint = annotation
    if isinstance(hint, str):
        hint = eval(hint, vars(typing), {})  # annotations are postponed strings
    optional = False
    args = typing.get_args(hint)
    if typing.get_origin(hint) in (typing.Union, types.UnionType) and type(None) in args:
        optional = True
        hint = next(a for a in args if a is not type(None))
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if hint is bool:
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {text!r} as {hint.__name__}") from None
    raise ConfigurationError(f"config key {key!r}: unsupported type {hint}")


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    schema: str | None = None

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        """Apply string ``values`` on top of ``base`` (defaults when omitted)."""
        base = base or cls()
        unknown = sorted(set(values) - set(known_keys()))
        for key in unknown:
            if key in DATA_DERIVED:
                raise ConfigurationError(f"config key {key!r} is set from the data or the command")
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        out = {}
        for name, cls_ in SECTIONS.items():
            fields = _fields(cls_)
            kw = {k: _parse_value(k, v, fields[k].type) for k, v in values.items() if k in fields}
            out[name] = getattr(base, name).replace(**kw)
        run = {k: values.get(k, getattr(base, k)) for k in RUN_KEYS}
        run = {k: None if v is None or v.lower() in ("", "none") else v for k, v in run.items()}
        return cls(out["pipeline"], out["model"], out["train"], **run)

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        values = dict(read_key_values(path)) if path is not None else {}
        values.update(overrides or {})
        return cls.from_mapping(values)

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for name in SECTIONS:
            section = getattr(self, name)
            for key in _fields(type(section)):
                out[key] = getattr(section, key)
        for key in RUN_KEYS:
            out[key] = getattr(self, key)
        return out

    def dumps(self) -> str:
        lines = []
        for key, value in sorted(self.to_mapping().items()):
            text = "none" if value is None else repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())
