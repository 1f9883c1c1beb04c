"""Environment settings, key-value config files and log setup."""
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Dict, Optional, Type, TypeVar, get_type_hints

from dotenv import load_dotenv

from errors import SceneFormatError

load_dotenv()

T = TypeVar("T")

LOG_LEVEL_VAR = "MASKSPLAT_LOG_LEVEL"
THREADS_VAR = "MASKSPLAT_THREADS"
SEED_VAR = "MASKSPLAT_SEED"


@dataclass(frozen=True)
class Settings:
    log_level: str
    threads: int
    seed: int


def load_settings() -> Settings:
    """Read settings from the environment (after .env has been loaded)"""
    threads = os.environ.get(THREADS_VAR)
    return Settings(
        log_level=os.environ.get(LOG_LEVEL_VAR, "INFO").upper(),
        threads=max(1, int(threads)) if threads else (os.cpu_count() or 1),
        seed=int(os.environ.get(SEED_VAR, "0")),
    )


# ========== LOGGING ==========

class StructuredFormatter(logging.Formatter):
    """One key=value line per record"""

    def format(self, record: logging.LogRecord) -> str:
        ts = datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(timespec="milliseconds")
        stage = getattr(record, "stage", "-")
        msg = record.getMessage().replace('"', "'")
        line = f'ts={ts} level={record.levelname} logger={record.name} stage={stage} msg="{msg}"'
        if record.exc_info:
            line += " exc=" + repr(self.formatException(record.exc_info).splitlines()[-1])
        return line


def setup_logging(level: Optional[str] = None) -> None:
    """Install a single stderr handler on the root logger"""
    level = (level or load_settings().log_level).upper()
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(StructuredFormatter())
    root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.INFO))


# ========== KEY-VALUE FILES ==========

class KeyValues(dict):
    """Parsed `key = value` pairs; `lines` maps each key to its source line"""

    def __init__(self):
        super().__init__()
        self.lines: Dict[str, int] = {}


def read_key_value_file(path: str) -> KeyValues:
    """Parse `key = value` lines; `#` starts a comment"""
    values = KeyValues()
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise SceneFormatError(path, f"cannot read config: {e}") from e
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneFormatError(path, f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise SceneFormatError(path, f"line {lineno}: empty key")
        values[key] = value
        values.lines[key] = lineno
    return values


def _coerce(value: str, kind: Any) -> Any:
    if kind is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is int:
        return int(float(value)) if "e" in value.lower() else int(value)
    if kind is float:
        return float(value)
    return value


def dataclass_from_mapping(cls: Type[T], values: Dict[str, str], source: str = "<config>") -> T:
    """Build a dataclass instance, converting strings to the declared field types"""
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    lines = getattr(values, "lines", {})
    kwargs: Dict[str, Any] = {}
    for key, raw in values.items():
        where = f"line {lines[key]}: " if key in lines else ""
        if key not in names:
            raise SceneFormatError(source, f"{where}unknown key {key!r}")
        try:
            kwargs[key] = _coerce(raw, hints[key])
        except ValueError as e:
            raise SceneFormatError(source, f"{where}bad value for {key}: {e}") from e
    return cls(**kwargs)
