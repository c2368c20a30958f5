"""Run configuration: one TOML file with [model], [train], [loss], [eval], [paths] tables.

Command-line overrides use dotted keys, e.g. ``train.epochs=5`` or
``model.encoder_widths=[8,16,16,16]``; values are parsed as TOML literals and
fall back to bare strings.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .losses import LossConfig
from .model import ConfigError, ModelConfig
from .train import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval_bounds: list[float] = field(default_factory=lambda: [50, 500])
    paths: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "loss": self.loss.to_dict(),
            "eval": {"bounds": list(self.eval_bounds)},
            "paths": dict(self.paths),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError([f"override {item!r} is not of the form section.key=value"])
    key, raw = item.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def _set(tree: dict, path: list[str], value) -> None:
    node = tree
    for part in path[:-1]:
        node = node.setdefault(part, {})
    node[path[-1]] = value


def build(tree: dict) -> RunConfig:
    """Validate a raw config tree, reporting every problem at once."""
    problems: list[str] = []
    built = {}
    for section, cls in SECTIONS.items():
        raw = dict(tree.get(section, {}))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        problems += [f"{section}.{u}: unknown key" for u in unknown]
        try:
            obj = cls(**{k: v for k, v in raw.items() if k in names})
        except (TypeError, ValueError) as exc:
            problems.append(f"{section}: {exc}")
            continue
        problems += obj.problems()
        built[section] = obj
    for section in set(tree) - set(SECTIONS) - {"eval", "paths"}:
        problems.append(f"{section}: unknown section")
    bounds = tree.get("eval", {}).get("bounds", [50, 500])
    if not isinstance(bounds, list) or any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        problems.append(f"eval.bounds={bounds!r} must be a strictly increasing list")
    if problems:
        raise ConfigError(problems)
    return RunConfig(built["model"], built["train"], built["loss"], list(bounds),
                     {k: str(v) for k, v in tree.get("paths", {}).items()})


def load_config(path=None, overrides=()) -> RunConfig:
    tree: dict = {}
    if path is not None:
        try:
            tree = tomli.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file {path} not found"]) from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
    for item in overrides:
        key, value = parse_override(item)
        _set(tree, key, value)
    return build(tree)
