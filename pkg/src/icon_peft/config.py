"""Run configuration: one strict JSON document covering model, recipe, training and data."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .adapters import AdapterRecipe
from .backbone import PRESETS, ViTConfig
from .data import DatasetSource
from .errors import ConfigError
from .trainer import TrainConfig

PRECISIONS = {"f32": "float32", "f64": "float64"}


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=lambda: ViTConfig(**{**PRESETS["tiny"], "num_classes": 8}))
    recipe: AdapterRecipe = field(default_factory=AdapterRecipe)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSource = field(default_factory=DatasetSource)
    output_dir: str = "runs/default"
    precision: str = "f32"
    init_checkpoint: str | None = None

    @property
    def dtype(self) -> str:
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "recipe": self.recipe.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "output_dir": self.output_dir,
            "precision": self.precision,
            "init_checkpoint": self.init_checkpoint,
        }


def _check_types(cls, raw: dict, path: str) -> None:
    defaults = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            defaults[f.name] = f.default_factory()
    for key, value in raw.items():
        default = defaults.get(key)
        if default is None:
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        elif isinstance(default, (list, tuple)):
            ok = isinstance(value, list)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{path}.{key}: expected {type(default).__name__}, got {json.dumps(value)}")


def _section(cls, raw, path: str, extra: tuple = ()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    allowed = {f.name for f in dataclasses.fields(cls)} | set(extra)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    body = {k: v for k, v in raw.items() if k not in extra}
    _check_types(cls, body, path)
    return body


def parse_run_config(raw: dict) -> RunConfig:
    """Build a :class:`RunConfig`, rejecting unknown keys with their dotted path."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")

    data = DatasetSource(**_section(DatasetSource, raw.get("data"), "data"))

    model_raw = raw.get("model") or {}
    body = _section(ViTConfig, model_raw, "model", extra=("preset",))
    preset_name = model_raw.get("preset", "tiny")
    if preset_name not in PRESETS:
        raise ConfigError(f"model.preset: unknown preset {preset_name!r}")
    merged = {**PRESETS[preset_name], "num_classes": data.num_classes, **body}
    model = ViTConfig(**merged)
    if model.num_classes != data.num_classes:
        raise ConfigError(
            f"model.num_classes {model.num_classes} disagrees with data.num_classes {data.num_classes}"
        )

    recipe = AdapterRecipe(**_section(AdapterRecipe, raw.get("recipe"), "recipe"))
    train = TrainConfig(**_section(TrainConfig, raw.get("train"), "train"))

    precision = raw.get("precision", "f32")
    if precision not in PRECISIONS:
        raise ConfigError(f"precision: must be one of {sorted(PRECISIONS)}, got {precision!r}")
    output_dir = raw.get("output_dir", "runs/default")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir: expected a string")
    init_checkpoint = raw.get("init_checkpoint")
    if init_checkpoint is not None and not isinstance(init_checkpoint, str):
        raise ConfigError("init_checkpoint: expected a string path")
    return RunConfig(model, recipe, train, data, output_dir, precision, init_checkpoint)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(raw)
