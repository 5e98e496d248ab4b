"""JSON run configuration with strict key checking and a generated schema.

A run config has the sections ``sampler``, ``augment``, ``encoder``, ``train``,
``loss``, ``synth`` and ``paths`` plus a top-level ``seed``. Every section is
optional; missing keys take the dataclass defaults, unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import CVAError, ConfigError
from .losses import LossWeights
from .nets import EncoderConfig
from .train import TrainConfig
from .views import AugmentConfig, SamplerConfig
from .volume import SynthSpec


@dataclass(frozen=True)
class Paths:
    data: str = "data"
    out: str = "runs"


SECTIONS: dict[str, type] = {
    "sampler": SamplerConfig,
    "augment": AugmentConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "synth": SynthSpec,
    "paths": Paths,
}
_SKIP = {"train": {"loss", "seed"}, "synth": {"seed"}}


@dataclass
class RunConfig:
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: Paths = field(default_factory=Paths)

    @property
    def loss(self) -> LossWeights:
        return self.train.loss

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            obj = self.loss if name == "loss" else getattr(self, name)
            if obj is None:
                out[name] = None
                continue
            d = dataclasses.asdict(obj)
            for k in _SKIP.get(name, ()):
                d.pop(k, None)
            out[name] = _jsonable(d)
        return out


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _section_fields(name: str) -> list[dataclasses.Field]:
    return [f for f in fields(SECTIONS[name]) if f.name not in _SKIP.get(name, ())]


def _build(name: str, data: dict | None, extra: dict | None = None):
    cls = SECTIONS[name]
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in _section_fields(name)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {k: tuple(v) if isinstance(v, list) and typing.get_origin(hints[k]) is tuple else v
              for k, v in data.items()}
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (CVAError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name!r} section: {e}") from None


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    loss = _build("loss", doc.get("loss"))
    augment = None if ("augment" in doc and doc["augment"] is None) else _build("augment", doc.get("augment"))
    return RunConfig(
        seed=seed,
        sampler=_build("sampler", doc.get("sampler")),
        augment=augment,
        encoder=_build("encoder", doc.get("encoder")),
        train=_build("train", doc.get("train"), {"loss": loss, "seed": seed}),
        synth=_build("synth", doc.get("synth"), {"seed": seed}),
        paths=_build("paths", doc.get("paths")),
    )


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return parse_run_config(doc)


def _json_type(tp) -> dict:
    origin = typing.get_origin(tp)
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    if origin is tuple:
        args = typing.get_args(tp)
        item = args[0] if args else float
        return {"type": "array", "items": _json_type(item)}
    return {}


def schema() -> dict:
    """JSON-schema description of the run config with defaults."""
    props: dict[str, Any] = {"seed": {"type": "integer", "minimum": 0, "default": 0}}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        default_obj = cls()
        sec = {}
        for f in _section_fields(name):
            entry = _json_type(hints[f.name])
            entry["default"] = _jsonable(getattr(default_obj, f.name))
            sec[f.name] = entry
        props[name] = {"type": ["object", "null"] if name == "augment" else "object",
                       "additionalProperties": False, "properties": sec}
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "run config",
            "type": "object", "additionalProperties": False, "properties": props}
