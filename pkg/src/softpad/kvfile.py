"""Flat ``key=value`` text files used for configs, material files and manifests."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", field=key)
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv(path.read_text(), source=str(path))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def format_kv(items: dict) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in items.items())


def write_kv(path, items: dict) -> None:
    Path(path).write_text(format_kv(items))


def get_float(kv: dict[str, str], key: str, default=None) -> float:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing required key {key!r}", field=key)
        return float(default)
    try:
        return float(kv[key])
    except ValueError:
        raise ConfigError(f"{key}: not a number: {kv[key]!r}", field=key) from None


def get_int(kv: dict[str, str], key: str, default=None) -> int:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing required key {key!r}", field=key)
        return int(default)
    try:
        return int(kv[key])
    except ValueError:
        raise ConfigError(f"{key}: not an integer: {kv[key]!r}", field=key) from None


def get_list(kv: dict[str, str], key: str, default=None) -> list[float]:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing required key {key!r}", field=key)
        return list(default)
    try:
        return [float(s) for s in kv[key].split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers: {kv[key]!r}", field=key) from None
