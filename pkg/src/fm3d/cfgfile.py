"""Reader for the ``[section]`` / ``key = value`` files used by run configs and
network descriptions.

``configparser`` drops line numbers once a file is parsed, and every
diagnostic here has to name the offending line, so the format is read by
hand.  Rules: UTF-8, ``#`` starts a comment (whole line or trailing),
blank lines ignored, keys are case-sensitive, a key may appear once per
section.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import BadValue, ConfigError, DuplicateKey, MissingKey, UnknownKey


@dataclass
class Entry:
    value: str
    line: int


@dataclass
class Section:
    name: str
    line: int
    entries: dict = field(default_factory=dict)
    path: str | None = None
    _used: set = field(default_factory=set)

    def __contains__(self, key):
        return key in self.entries

    def raw(self, key, default=None, required=False):
        if key in self.entries:
            self._used.add(key)
            return self.entries[key].value
        if required:
            raise MissingKey(f"[{self.name}] missing required key '{key}'", self.path, self.line)
        return default

    def line_of(self, key):
        entry = self.entries.get(key)
        return entry.line if entry else self.line

    def get(self, key, convert=str, default=None, required=False, check=None, expect=""):
        """Fetch ``key`` converted by ``convert``; ``check`` is a validity predicate."""
        raw = self.raw(key, required=required)
        if raw is None:
            return default
        line = self.line_of(key)
        try:
            value = convert(raw)
        except (TypeError, ValueError) as exc:
            raise BadValue(f"[{self.name}] {key} = {raw!r}: {exc}", self.path, line) from None
        if check is not None and not check(value):
            raise BadValue(f"[{self.name}] {key} = {raw!r}: expected {expect or 'a valid value'}",
                           self.path, line)
        return value

    def reject_unknown(self, allowed):
        for key, entry in self.entries.items():
            if key not in allowed:
                raise UnknownKey(f"[{self.name}] unknown key '{key}'", self.path, entry.line)


def parse_text(text: str, path=None) -> list[Section]:
    sections: list[Section] = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"malformed section header {raw.strip()!r}", path, lineno)
            name = line[1:-1].strip()
            if any(s.name == name for s in sections):
                raise DuplicateKey(f"section [{name}] appears twice", path, lineno)
            current = Section(name, lineno, path=path)
            sections.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        if current is None:
            raise ConfigError("key outside of any [section]", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path, lineno)
        if key in current.entries:
            raise DuplicateKey(
                f"[{current.name}] duplicate key '{key}' (first set on line "
                f"{current.entries[key].line})", path, lineno)
        current.entries[key] = Entry(value, lineno)
    return sections


def parse_file(path) -> list[Section]:
    path = Path(path)
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.replace("x", ",").split(","))


def boolean(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected true/false")
