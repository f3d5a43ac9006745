"""Versioned, hash-checked GridConfig presets shipped as JSON."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from opre.game import ConfigError, GridConfig

FORMAT_VERSION = 1
PRESETS = ("rws", "rps_arena", "rws_7x7")


def parse_preset(text: str, source: str = "<preset>") -> GridConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: {exc.msg}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{source}: unsupported format_version {doc.get('format_version')!r}")
    config = GridConfig.from_dict(doc["config"])
    expected = doc.get("config_hash")
    if expected != config.config_hash():
        raise ConfigError(f"{source}: config_hash mismatch (file says {expected})")
    return config


def load_preset(name_or_path: str) -> GridConfig:
    """Load a shipped preset by name, or any preset file by path."""
    if name_or_path in PRESETS:
        text = resources.files(__name__).joinpath(f"{name_or_path}.json").read_text()
        return parse_preset(text, f"{name_or_path}.json")
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"unknown preset {name_or_path!r}")
    return parse_preset(path.read_text(), str(path))


def dump_preset(config: GridConfig) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
