"""Minimal block-based config format used by feeder files, scenario configs
and stream sidecars.

A file is a sequence of sections.  A section starts with a ``[name]`` header
and collects ``key = value`` lines until the next header.  Section names may
repeat (e.g. one ``[branch]`` block per branch).  ``#`` starts a comment,
blank lines are ignored.  Values are kept as raw strings; consumers convert
them through the ``as_*`` helpers and are expected to reject unknown keys.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Malformed config/feeder text or an unknown/missing key."""


def parse_blocks(text: str) -> list[tuple[str, dict[str, str]]]:
    """Parse config text into an ordered list of (section, {key: value})."""
    blocks: list[tuple[str, dict[str, str]]] = []
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"line {lineno}: empty section name")
            current = {}
            blocks.append((name, current))
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in current:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value.strip()
    return blocks


def format_blocks(blocks: list[tuple[str, dict[str, str]]]) -> str:
    out: list[str] = []
    for name, fields in blocks:
        out.append(f"[{name}]")
        for key, value in fields.items():
            out.append(f"{key} = {value}")
        out.append("")
    return "\n".join(out)


def check_keys(section: str, fields: dict[str, str], allowed: set[str],
               required: set[str] = frozenset()) -> None:
    """Reject unknown keys and report missing required ones."""
    unknown = set(fields) - allowed
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")
    missing = required - set(fields)
    if missing:
        raise ConfigError(f"[{section}]: missing keys {sorted(missing)}")


def as_int(section: str, fields: dict[str, str], key: str, default=None) -> int:
    if key not in fields:
        if default is None:
            raise ConfigError(f"[{section}]: missing integer key {key!r}")
        return default
    try:
        return int(fields[key])
    except ValueError:
        raise ConfigError(f"[{section}].{key}: not an integer: {fields[key]!r}") from None


def as_float(section: str, fields: dict[str, str], key: str, default=None) -> float:
    if key not in fields:
        if default is None:
            raise ConfigError(f"[{section}]: missing numeric key {key!r}")
        return default
    try:
        return float(fields[key])
    except ValueError:
        raise ConfigError(f"[{section}].{key}: not a number: {fields[key]!r}") from None


_BOOLS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def as_bool(section: str, fields: dict[str, str], key: str, default=None) -> bool:
    if key not in fields:
        if default is None:
            raise ConfigError(f"[{section}]: missing boolean key {key!r}")
        return default
    value = fields[key].lower()
    if value not in _BOOLS:
        raise ConfigError(f"[{section}].{key}: not a boolean: {fields[key]!r}")
    return _BOOLS[value]


def as_str(section: str, fields: dict[str, str], key: str, default=None) -> str:
    if key not in fields:
        if default is None:
            raise ConfigError(f"[{section}]: missing key {key!r}")
        return default
    return fields[key]


def as_floats(section: str, fields: dict[str, str], key: str) -> list[float]:
    """Comma-separated float list, e.g. ``1e-2, 1e-4, 1e-6``."""
    raw = as_str(section, fields, key)
    try:
        return [float(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"[{section}].{key}: bad float list: {raw!r}") from None


def as_ints(section: str, fields: dict[str, str], key: str) -> list[int]:
    raw = as_str(section, fields, key)
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"[{section}].{key}: bad integer list: {raw!r}") from None


def as_pairs(section: str, fields: dict[str, str], key: str, default=None) -> list[tuple[int, int]]:
    """Branch list like ``3-4, 2-6`` into [(3, 4), (2, 6)]."""
    if key not in fields:
        if default is None:
            raise ConfigError(f"[{section}]: missing key {key!r}")
        return default
    raw = fields[key]
    pairs: list[tuple[int, int]] = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            a, b = part.split("-")
            pairs.append((int(a), int(b)))
        except ValueError:
            raise ConfigError(f"[{section}].{key}: bad pair {part!r} (want 'i-j')") from None
    return pairs
