"""Flat ``key = value`` config files with ``[section]`` headers and ``#`` comments."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        section = sections.setdefault(current, {})
        if key in section:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in section [{current}]")
        section[key] = value
    return sections


def load_config(path) -> dict[str, dict[str, str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 text") from exc
    return parse_config_text(text)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def serialize_config(sections: dict[str, dict]) -> str:
    lines = []
    for name in sorted(sections):
        if name:
            lines.append(f"[{name}]")
        for key in sorted(sections[name]):
            lines.append(f"{key} = {format_value(sections[name][key])}")
        lines.append("")
    return "\n".join(lines)


def coerce(value: str, like):
    """Convert ``value`` to the type of the default ``like``."""
    try:
        if isinstance(like, bool):
            lowered = value.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            return tuple(float(v) for v in value.split(","))
    except ValueError as exc:
        raise ConfigError(f"cannot read {value!r} as {type(like).__name__}") from exc
    return value


def apply_section(defaults: dict, section: dict[str, str], where: str) -> dict:
    out = dict(defaults)
    for key, value in section.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        like = defaults[key]
        out[key] = value if like is None else coerce(value, like)
    return out
