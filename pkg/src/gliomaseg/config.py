"""Plain-text ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored.  Values stay strings until a
typed getter converts them; conversion failures name the offending key.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import BadConfig, ConfigError


class MissingKey(ConfigError):
    category = "ConfigError"


def parse_config_text(text: str, source: str = "<string>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise BadConfig(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


@dataclass
class Config:
    values: dict = field(default_factory=dict)
    source: str = "<none>"

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls(parse_config_text(text, str(path)), str(path))

    def with_overrides(self, pairs) -> "Config":
        merged = dict(self.values)
        for pair in pairs or ():
            if "=" not in pair:
                raise BadConfig(f"override {pair!r} is not key=value")
            k, v = (s.strip() for s in pair.split("=", 1))
            merged[k] = v
        return Config(merged, self.source)

    def require(self, *keys: str):
        missing = [k for k in keys if not self.values.get(k)]
        if missing:
            raise MissingKey(f"missing required config key '{missing[0]}'"
                             + (f" (also {', '.join(missing[1:])})" if missing[1:] else ""))

    def get(self, key: str, default=None):
        v = self.values.get(key)
        return default if v in (None, "") else v

    def _convert(self, key, default, fn, kind):
        v = self.get(key)
        if v is None:
            return default
        try:
            return fn(v)
        except ValueError:
            raise BadConfig(f"config key '{key}' must be {kind}, got {v!r}") from None

    def get_int(self, key: str, default=None):
        return self._convert(key, default, int, "an integer")

    def get_float(self, key: str, default=None):
        return self._convert(key, default, float, "a number")

    def get_bool(self, key: str, default=False):
        def conv(v):
            low = v.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        return self._convert(key, default, conv, "a boolean")

    def get_list(self, key: str, default=None, item=str):
        def conv(v):
            return tuple(item(s.strip()) for s in v.split(",") if s.strip())
        return self._convert(key, default, conv, "a comma-separated list")

    def get_path(self, key: str, default=None):
        v = self.get(key)
        return Path(v) if v is not None else default

    def snapshot(self) -> dict:
        return dict(sorted(self.values.items()))
