"""YAML run configs mapped onto the frozen dataclasses, with file:line errors."""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

import yaml

from opre.game import ConfigError
from opre.harness import TrainConfig


def _line_map(node, path=(), out=None) -> dict[tuple, int]:
    """1-based line of every key (and of the root) in a composed YAML tree."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            out[path + (key.value,)] = key.start_mark.line + 1
            _line_map(value, path + (key.value,), out)
    return out


class _Builder:
    def __init__(self, source: str, lines: dict[tuple, int]):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple, msg: str):
        line = self.lines.get(path)
        while line is None and path:
            path = path[:-1]
            line = self.lines.get(path)
        where = ".".join(map(str, path)) or "<root>"
        raise ConfigError(f"{self.source}:{line or 1}: {where}: {msg}")

    def value(self, tp, v, path):
        origin = typing.get_origin(tp)
        if dataclasses.is_dataclass(tp):
            if not isinstance(v, dict):
                self.fail(path, f"expected a mapping, got {type(v).__name__}")
            return self.dataclass(tp, v, path)
        if origin is tuple:
            args = typing.get_args(tp)
            if not isinstance(v, list):
                self.fail(path, f"expected a list, got {type(v).__name__}")
            inner = args[0]
            return tuple(self.value(inner, x, path) for x in v)
        if origin in (typing.Union, types.UnionType):
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if v is None:
                return None
            return self.value(args[0], v, path)
        if tp is bool:
            if not isinstance(v, bool):
                self.fail(path, f"expected true/false, got {v!r}")
            return v
        if tp is int:
            if isinstance(v, bool) or not isinstance(v, int):
                self.fail(path, f"expected an integer, got {v!r}")
            return v
        if tp is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self.fail(path, f"expected a number, got {v!r}")
            return float(v)
        if tp is str:
            if not isinstance(v, str):
                self.fail(path, f"expected a string, got {v!r}")
            return v
        return v

    def dataclass(self, cls, data: dict, path: tuple):
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, v in data.items():
            if key not in names:
                self.fail(path + (key,), f"unknown key (expected one of {', '.join(sorted(names))})")
            kwargs[key] = self.value(hints[key], v, path + (key,))
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            bad = next((k for k in kwargs if k in str(exc)), None)
            self.fail(path + ((bad,) if bad else ()), str(exc))


def parse_train_config(text: str, source: str = "<config>", overrides: dict | None = None) -> TrainConfig:
    """Build a :class:`TrainConfig`; ``overrides`` replace top-level keys after parsing."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{source}:{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data, lines = {}, {(): 1}
    else:
        lines = _line_map(node)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    data = {**data, **(overrides or {})}
    return _Builder(source, lines).dataclass(TrainConfig, data, ())


def load_train_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return parse_train_config(path.read_text(), str(path), overrides)


def dump_train_config(cfg: TrainConfig) -> str:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x

    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False)
