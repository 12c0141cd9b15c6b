"""Functions for reading and writing key = value configuration files."""

import configparser
import dataclasses
from typing import Dict, Type, TypeVar

from trip_attention.core import custom_errors

T = TypeVar("T")

_SECTION = "config"


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse key = value lines into a dictionary.

    Lines starting with # or ; are comments. Keys are case sensitive.

    Parameters
    ----------
    text (str) : contents of a configuration file

    Returns
    -------
    values (dict) : raw string values keyed by name

    Examples
    --------
    >>> parse_key_values("lr = 0.001\\n# comment\\nepochs = 5")
    {'lr': '0.001', 'epochs': '5'}
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as err:
        raise custom_errors.ConfigInvalid(f"cannot parse configuration: {err}")

    return dict(parser[_SECTION])


def from_key_values(cls: Type[T], text: str) -> T:
    """Build a configuration dataclass from key = value text.

    Values are converted using the type of each dataclass field's default value.

    Parameters
    ----------
    cls (type) : frozen dataclass with defaults for every field
    text (str) : contents of a configuration file

    Returns
    -------
    config (cls) : validated configuration
    """
    raw = parse_key_values(text)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in raw if k not in fields]
    if unknown:
        raise custom_errors.ConfigInvalid(
            f"unknown keys for {cls.__name__}: {unknown}"
        )

    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _convert(fields[name], value)

    return cls(**kwargs)


def to_key_values(config) -> str:
    """Format a configuration dataclass as key = value lines."""
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, (tuple, list)):
            value = ",".join(str(x) for x in value)
        lines.append(f"{f.name} = {value}")

    return "\n".join(lines) + "\n"


def _convert(field: dataclasses.Field, value: str):
    """Convert a raw string using the type of the field default."""
    if field.default is not dataclasses.MISSING:
        default = field.default
    else:
        default = field.default_factory()

    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [x.strip() for x in value.split(",") if x.strip()]
            return tuple(items)
    except ValueError:
        raise custom_errors.ConfigInvalid(
            f"invalid value for '{field.name}': '{value}'"
        )

    return value
