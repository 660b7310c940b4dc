"""
Parses JSON config objects strictly into frozen dataclasses.

Unknown keys abort before any work starts; nested dataclasses are parsed recursively;
missing keys fall back to the dataclass defaults.
"""

import dataclasses
import hashlib
import json
import logging
import types
import typing
from pathlib import Path
from typing import Any

log = logging.getLogger(__name__)


class ConfigError(Exception):
    """
    Signals an invalid configuration; `kind` is a stable machine-readable label.
    """

    def __init__(self, kind: str, message: str) -> None:
        super().__init__(message)
        self.kind: str = kind


def _unwrap_optional(field_type: Any) -> Any:
    """
    Returns the non-None member of an `X | None` annotation, else the annotation itself.

    Called by `_coerce_value()`.
    """
    origin: Any = typing.get_origin(field_type)
    if origin in (typing.Union, types.UnionType):
        members: list[Any] = [arg for arg in typing.get_args(field_type) if arg is not type(None)]
        if len(members) == 1:
            return members[0]
    return field_type


def _coerce_value(field_type: Any, value: Any, context: str) -> Any:
    """
    Converts one JSON value to the declared field type, recursing into dataclasses.

    Called by `parse_strict()`.
    """
    if value is None:
        return None
    target: Any = _unwrap_optional(field_type)
    origin: Any = typing.get_origin(target)
    coerced: Any = value
    if dataclasses.is_dataclass(target):
        coerced = parse_strict(target, value, context)
    elif origin is tuple:
        if not isinstance(value, list | tuple):
            raise ConfigError('invalid_config_value', f'{context}: expected a list, got ``{value!r}``')
        args: tuple[Any, ...] = typing.get_args(target)
        item_type: Any = args[0] if args else Any
        coerced = tuple(_coerce_value(item_type, item, context) for item in value)
    elif target is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError('invalid_config_value', f'{context}: expected a number, got ``{value!r}``')
        coerced = float(value)
    elif target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError('invalid_config_value', f'{context}: expected an integer, got ``{value!r}``')
    elif target is bool:
        if not isinstance(value, bool):
            raise ConfigError('invalid_config_value', f'{context}: expected a boolean, got ``{value!r}``')
    elif target is str:
        if not isinstance(value, str):
            raise ConfigError('invalid_config_value', f'{context}: expected a string, got ``{value!r}``')
    return coerced


def parse_strict[T](cls: type[T], data: Any, context: str = 'config') -> T:
    """
    Builds a dataclass instance from a JSON object, rejecting unrecognized keys.

    Called by `load_config()` and by `_coerce_value()` for nested dataclasses.
    """
    if not isinstance(data, dict):
        raise ConfigError('invalid_config_value', f'{context}: expected a JSON object')
    fields: dict[str, dataclasses.Field] = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown: list[str] = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError('unknown_config_key', f'{context}: unknown key(s) {unknown}')
    hints: dict[str, Any] = typing.get_type_hints(cls)
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        kwargs[name] = _coerce_value(hints[name], value, f'{context}.{name}')
    try:
        instance: T = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError('invalid_config_value', f'{context}: {exc}') from exc
    return instance


def load_config[T](cls: type[T], path: Path | None) -> T:
    """
    Loads a JSON config file into `cls`; a missing path yields the defaults.

    Called by the `expression_pipeline` subcommands.
    """
    if path is None:
        return cls()
    try:
        raw: Any = json.loads(Path(path).read_text(encoding='utf-8'))
    except FileNotFoundError as exc:
        raise ConfigError('missing_file', f'config file not found: {path}') from exc
    except json.JSONDecodeError as exc:
        raise ConfigError('invalid_json', f'{path}: {exc}') from exc
    log.debug(f'loaded config from ``{path}``')
    return parse_strict(cls, raw, context=Path(path).name)


def config_to_dict(config: Any) -> dict[str, Any]:
    """
    Converts a (nested) config dataclass to plain JSON-ready data.
    """
    return json.loads(json.dumps(dataclasses.asdict(config)))


def config_hash(config_dict: dict[str, Any]) -> str:
    """
    Hashes the canonical JSON form of a config (sorted keys, no whitespace).
    """
    canonical: str = json.dumps(config_dict, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
