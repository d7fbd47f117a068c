"""Run configuration: one flat key-value document covering every module.

File format, line-oriented and diff-friendly:

    # comment
    scene.num_classes = 6
    optim.head_lr = 0.001
    n_train = 2000

Dotted prefixes address sub-configs; bare keys are top-level run settings.
Values are parsed by the target dataclass field's type. The same
`section.key=value` strings work as command-line overrides.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from .alignment import AlignmentConfig
from .encoders import EncoderConfig
from .heads import MultiTaskConfig
from .scenes import SceneConfig
from .separation import StftConfig


@dataclass(frozen=True)
class OptimConfig:
    momentum: float = 0.9
    head_lr: float = 1e-3
    backbone_lr: float = 1e-4
    decay: float = 0.1
    decay_every: int = 20

    def __post_init__(self) -> None:
        if self.head_lr <= 0 or self.backbone_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.decay <= 0 or self.decay_every < 1:
            raise ValueError("decay must be positive, decay_every >= 1")


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    multitask: MultiTaskConfig = field(default_factory=MultiTaskConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    n_train: int = 2000
    n_test: int = 100
    batch_size: int = 16
    epochs_stage1: int = 4
    epochs_stage2: int = 3
    epochs_separator: int = 2
    separator_scenes: int = 300   # train scenes mined for separator pairs
    mask_mode: str = "ratio"      # "ratio" | "binary" target masks
    tau_cls: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (negative sampling)")
        if min(self.epochs_stage1, self.epochs_stage2, self.epochs_separator) < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.mask_mode not in ("ratio", "binary"):
            raise ValueError("mask_mode must be 'ratio' or 'binary'")
        if not 0.0 < self.tau_cls < 1.0:
            raise ValueError("tau_cls must lie strictly inside (0, 1)")


_SECTIONS = ("scene", "encoder", "multitask", "alignment", "stft", "optim")


def _parse_value(text: str, target_type) -> object:
    origin = typing.get_origin(target_type)
    if origin is typing.Union:   # Optional[...]
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if text.lower() in ("none", "null"):
            return None
        return _parse_value(text, args[0])
    if origin is tuple:
        elem = typing.get_args(target_type)[0]
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_parse_value(p, elem) for p in parts)
    if target_type is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse bool from {text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    return text


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def apply_assignments(config: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply `key=value` / `section.key=value` strings to a config."""
    section_updates: dict[str, dict] = {}
    top_updates: dict[str, object] = {}
    top_types = _field_types(RunConfig)
    for raw in assignments:
        if "=" not in raw:
            raise ValueError(f"expected key=value, got {raw!r}")
        key, text = (s.strip() for s in raw.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ValueError(f"unknown section {section!r} in {raw!r}")
            sub = getattr(config, section)
            types = _field_types(type(sub))
            if name not in types:
                raise ValueError(f"unknown key {name!r} in section {section!r}")
            section_updates.setdefault(section, {})[name] = _parse_value(text, types[name])
        else:
            if key not in top_types or key in _SECTIONS:
                raise ValueError(f"unknown config key {key!r}")
            top_updates[key] = _parse_value(text, top_types[key])
    for section, updates in section_updates.items():
        top_updates[section] = dataclasses.replace(getattr(config, section), **updates)
    return dataclasses.replace(config, **top_updates)


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    config = RunConfig()
    assignments: list[str] = []
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                assignments.append(stripped)
    assignments.extend(overrides or [])
    return apply_assignments(config, assignments)


def format_config(config: RunConfig) -> str:
    """Render the full effective configuration in the file format."""
    lines: list[str] = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(config, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(type(value)):
                v = getattr(value, sub.name)
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{f.name}.{sub.name} = {v}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
