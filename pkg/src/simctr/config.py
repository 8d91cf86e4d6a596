"""Layered run configuration: command-line flag > config file > default."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def load_config_file(path) -> dict:
    """Read a JSON or YAML mapping. A top-level section named after the command wins."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    if p.suffix.lower() in (".yaml", ".yml"):
        import yaml

        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML: {exc}") from None
    else:
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def _normalize(d: dict) -> dict:
    return {str(k).replace("-", "_"): v for k, v in d.items()}


@dataclass
class AppConfig:
    """The fully resolved settings of one command invocation."""

    command: str
    values: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, command: str, defaults: dict, file_values: dict | None, cli_values: dict) -> "AppConfig":
        file_values = _normalize(file_values or {})
        if isinstance(file_values.get(command.replace("-", "_")), dict):
            section = _normalize(file_values.pop(command.replace("-", "_")))
            file_values = {**{k: v for k, v in file_values.items() if not isinstance(v, dict)}, **section}
        values, sources = {}, {}
        for k, v in defaults.items():
            values[k], sources[k] = v, "default"
        for k, v in file_values.items():
            if k not in defaults:
                raise ConfigError(f"unknown key {k!r} for command {command!r}")
            values[k], sources[k] = v, "file"
        for k, v in _normalize(cli_values).items():
            if v is not None:
                values[k], sources[k] = v, "cli"
        return cls(command, values, sources)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def to_dict(self) -> dict:
        return {"command": self.command, "values": _jsonable(self.values)}

    def write(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return p


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    return v


def require(cfg: AppConfig, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"{cfg.command}: missing required setting(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")
