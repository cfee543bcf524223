"""Flat TOML run configuration

A run configuration is one flat table of ``key = value`` pairs. Keys are the field names of
the typed configuration dataclasses (:class:`~biascite.synthetic.GenConfig`,
:class:`~biascite.training.TrainConfig`, ...) plus a few path and split keys owned by the CLI.
Command line overrides of the form ``key=value`` are parsed as TOML scalars, so
``--set lambda_reg=0.1`` yields a float and ``--set two_stage=false`` a bool.
"""
import dataclasses
import typing
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import Mapping
from typing import Optional
from typing import Tuple
from typing import Type
from typing import TypeVar

import toml

from biascite.errors import ConfigError


__all__ = ["load_config_file", "parse_override", "apply_overrides", "from_mapping", "dump_config"]


T = TypeVar("T")


def load_config_file(path: Path) -> Dict[str, Any]:
    """Read a flat TOML configuration file

    :raises ConfigError: If the file is not valid TOML or holds nested tables
    """
    try:
        data = toml.load(str(path))
    except (toml.TomlDecodeError, TypeError) as err:
        raise ConfigError(f"Failed to parse configuration file '{path}': {err}") from err
    nested = [key for key, value in data.items() if isinstance(value, dict)]
    if nested:
        raise ConfigError(f"configuration must be flat, found table(s): {', '.join(sorted(nested))}")
    return data


def parse_override(text: str) -> Tuple[str, Any]:
    """Parse one ``key=value`` override; the value is read as a TOML scalar or array

    Bare words that are not valid TOML are taken as strings.
    """
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    try:
        value = toml.loads(f"value = {raw.strip()}")["value"]
    except toml.TomlDecodeError:
        value = raw.strip()
    return key, value


def apply_overrides(base: Mapping[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    merged = dict(base)
    for item in overrides:
        key, value = parse_override(item)
        merged[key] = value
    return merged


def _coerce(name: str, hint: Any, value: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(item for item in args if item is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{name}' must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{name}' must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{name}' must be a number, got {value!r}")
        return float(value)
    if hint is str:
        return str(value)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{name}' must be an array, got {value!r}")
        inner = args[0] if args else Any
        return tuple(_coerce(name, inner, item) for item in value) if inner is not Any else tuple(value)
    return value


def from_mapping(cls: Type[T], data: Mapping[str, Any], allowed_extra: Iterable[str] = ()) -> T:
    """Build dataclass ``cls`` from the keys of ``data`` that name its fields

    :param allowed_extra: Keys that belong to other sections of the same run configuration;
                          any other unknown key is rejected
    :raises ConfigError: On unknown keys or values of the wrong type
    """
    hints = typing.get_type_hints(cls)
    fields = {item.name for item in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = set(data) - fields - set(allowed_extra)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
    values = {key: _coerce(key, hints[key], value) for key, value in data.items() if key in fields}
    try:
        return cls(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def dump_config(sections: Iterable[Any], extra: Optional[Mapping[str, Any]] = None) -> str:
    """Render dataclass instances (and extra keys) as one flat, key-sorted TOML table"""
    flat: Dict[str, Any] = dict(extra or {})
    for section in sections:
        for key, value in dataclasses.asdict(section).items():
            if value is None:
                continue
            flat[key] = list(value) if isinstance(value, tuple) else value
    return toml.dumps({key: flat[key] for key in sorted(flat)})
