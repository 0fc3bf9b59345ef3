"""Run configuration and the instruction-file schema."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .mmdit import ModelConfig
from .partition import BoxSpec, LayoutError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 4.0
    train_embeddings: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 16
    steps: int = 5000
    sampler_steps: int = 16
    schedule: str = "default"
    seed: int = 0
    ckpt_every: int = 500
    lora: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.batch < 1 or self.steps < 0 or self.sampler_steps < 1:
            raise ConfigError("batch and sampler_steps must be >= 1, steps >= 0")
        if self.ckpt_every < 1:
            raise ConfigError("ckpt_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        _reject_unknown(cls, data, "run config")
        if "model" in data:
            try:
                data["model"] = ModelConfig.from_dict(data["model"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"model: {exc}") from exc
        if "lora" in data:
            _reject_unknown(LoraConfig, data["lora"], "lora config")
            data["lora"] = LoraConfig(**data["lora"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)


def _reject_unknown(cls, data: dict, what: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")


# ---------------------------------------------------------------------------
# instruction files: {"image": str, "boxes": [{"x","y","w","h","src","tgt"}, ...]}
# ---------------------------------------------------------------------------

_BOX_FIELDS = {"x": int, "y": int, "w": int, "h": int, "src": str, "tgt": str}


@dataclass
class Instructions:
    image: str
    boxes: list[BoxSpec]


def parse_instructions(text: str, source: str = "<instructions>") -> Instructions:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    extra = sorted(set(raw) - {"image", "boxes"})
    if extra:
        raise ConfigError(f"{source}: unknown keys {extra}")
    image = raw.get("image", "")
    if not isinstance(image, str):
        raise ConfigError(f"{source}: field 'image' must be a string")
    boxes_raw = raw.get("boxes")
    if not isinstance(boxes_raw, list):
        raise ConfigError(f"{source}: field 'boxes' must be a list")
    boxes = []
    for i, b in enumerate(boxes_raw):
        where = f"{source}: boxes[{i}]"
        if not isinstance(b, dict):
            raise ConfigError(f"{where} must be an object")
        missing = sorted(set(_BOX_FIELDS) - set(b))
        extra = sorted(set(b) - set(_BOX_FIELDS))
        if missing or extra:
            raise ConfigError(f"{where}: missing {missing} unknown {extra}")
        for key, typ in _BOX_FIELDS.items():
            v = b[key]
            if not isinstance(v, typ) or isinstance(v, bool):
                raise ConfigError(f"{where}.{key}: expected {typ.__name__}, got {v!r}")
        try:
            boxes.append(BoxSpec(**b))
        except LayoutError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return Instructions(image, boxes)


def load_instructions(path: str | Path) -> Instructions:
    return parse_instructions(Path(path).read_text(), str(path))
