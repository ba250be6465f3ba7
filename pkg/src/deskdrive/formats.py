"""Plain-text config files: flat ``key = value`` lines under optional ``[section]`` headers.

Lines starting with ``#`` are comments. Keys are case-sensitive. Files without
any section header are read into the ``""`` section.
"""

from __future__ import annotations

import configparser
import csv
import io
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class ConfigError(ValueError):
    """A configuration file is missing, malformed, or inconsistent."""


_ROOT = "__root__"


def parse_keyvalue(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), strict=True)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_ROOT}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    out: dict[str, dict[str, str]] = {}
    for name in parser.sections():
        key = "" if name == _ROOT else name
        section = dict(parser.items(name))
        if key or section:
            out[key] = section
    return out


def read_keyvalue(path: str | os.PathLike) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such file: {path}")
    return parse_keyvalue(path.read_text(encoding="utf-8"))


def format_keyvalue(values: Mapping[str, object], header: Sequence[str] = (),
                    section: str | None = None) -> str:
    lines = [f"# {line}" if line else "#" for line in header]
    if section:
        lines.append(f"[{section}]")
    for key, value in values.items():
        lines.append(f"{key} = {fmt(value)}")
    return "\n".join(lines) + "\n"


def require(section: Mapping[str, str], key: str, cast=float, where: str = ""):
    if key not in section:
        raise ConfigError(f"missing key '{key}'{' in ' + where if where else ''}")
    try:
        return cast(section[key])
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {section[key]!r}") from None


def fmt(value: object) -> str:
    """Deterministic text for CSV and config values (round-trips floats exactly)."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "item"):  # numpy scalar
        return fmt(value.item())
    return str(value)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: str | os.PathLike) -> tuple[list[str], list[dict[str, str]]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path} is empty")
        rows = list(reader)
    return list(reader.fieldnames), rows
