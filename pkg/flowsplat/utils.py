"""Utilities."""

import dataclasses
import os
import tempfile
from collections.abc import Iterator, Mapping
from contextlib import contextmanager
from os import path

import numpy as np
import torch

from flowsplat import settings
from flowsplat.errors import ConfigError

########################################################################################
# type annotations
# type hint for path-like objects
PathType = str | os.PathLike
# type hint for keyword arguments
KwargsType = Mapping | None
# type hint for array-like inputs that are converted to tensors
ArrayLike = torch.Tensor | np.ndarray | list | tuple


def as_tensor(value: ArrayLike, *, dtype: torch.dtype | None = None) -> torch.Tensor:
    """Convert `value` to a tensor in the working precision without copying tensors."""
    if dtype is None:
        dtype = settings.DTYPE
    if isinstance(value, torch.Tensor):
        return value.to(dtype)
    return torch.as_tensor(np.asarray(value), dtype=dtype)


@contextmanager
def atomic_path(dst_filepath: PathType) -> Iterator[str]:
    """Yield a temporary path that replaces `dst_filepath` on success."""
    dst_dir = path.dirname(path.abspath(dst_filepath))
    os.makedirs(dst_dir, exist_ok=True)
    # keep the extension so that extension-sniffing writers still work
    suffix = path.splitext(str(dst_filepath))[1]
    fd, tmp_filepath = tempfile.mkstemp(dir=dst_dir, suffix=suffix)
    os.close(fd)
    try:
        yield tmp_filepath
        os.replace(tmp_filepath, dst_filepath)
    finally:
        if path.exists(tmp_filepath):
            os.remove(tmp_filepath)


########################################################################################
# INI configuration
def format_config_value(value) -> str:
    """Render a dataclass field value for an INI file."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple | list):
        if value and isinstance(value[0], tuple | list):
            return "; ".join(format_config_value(v) for v in value)
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_value(text: str, default, *, key: str):
    """Parse `text` into the type of `default`."""
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return lowered in ("true", "yes", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            if ";" in text or (default and isinstance(default[0], tuple)):
                return tuple(
                    tuple(float(v) for v in item.split(","))
                    for item in text.split(";")
                    if item.strip()
                )
            return tuple(float(v) for v in text.split(","))
        return text
    except ValueError as err:
        raise ConfigError(f"Cannot parse `{key} = {text}`: {err}") from err


def config_kwargs(cls, section: Mapping[str, str], *, section_name: str) -> dict:
    """Keyword arguments of the dataclass `cls` read from a config section.

    Raises `ConfigError` for keys that are not fields of `cls`.
    """
    defaults = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            defaults[f.name] = f.default_factory()
    kwargs = {}
    for key, text in section.items():
        if key not in defaults:
            raise ConfigError(f"Unknown key `{key}` in section [{section_name}].")
        default = defaults[key]
        if default is None:
            kwargs[key] = None if text.strip().lower() == "none" else text.strip()
        else:
            kwargs[key] = parse_config_value(text, default, key=key)
    return kwargs
