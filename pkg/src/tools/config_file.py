"""Run configuration files: ``key = value`` lines under ``[section]`` headers"""
from typing import Any, Dict, Optional

import structlog
from pydantic import ValidationError

from ..config.settings import RunConfig
from ..utils.exceptions import ConfigError, ParseError

logger = structlog.get_logger(__name__)

SECTIONS = ("model", "train", "synth")


def _scalar(text: str) -> Any:
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _value(text: str) -> Any:
    if "," in text and not (text[:1] in "\"'" and text[-1:] == text[:1]):
        return [_scalar(part.strip()) for part in text.split(",") if part.strip()]
    return _scalar(text)


def parse(text: str) -> Dict[str, Any]:
    """Nested dict of top-level keys and one dict per section"""
    result: Dict[str, Any] = {}
    current: Dict[str, Any] = result
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        stripped = line.lstrip()
        if not stripped:
            continue
        offset = len(line) - len(stripped)
        if stripped.startswith("["):
            if not stripped.endswith("]") or len(stripped) < 3:
                raise ParseError("malformed section header", number, offset)
            name = stripped[1:-1].strip()
            if name in result:
                raise ParseError(f"duplicate section [{name}]", number, offset)
            current = result.setdefault(name, {})
            continue
        if "=" not in stripped:
            raise ParseError("expected 'key = value'", number, offset)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ParseError("missing key", number, offset)
        if not value:
            raise ParseError(f"missing value for {key!r}", number, line.index("=") + 1)
        if key in current:
            raise ParseError(f"duplicate key {key!r}", number, offset)
        current[key] = _value(value)
    return result


def read(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as handle:
        return parse(handle.read())


def build_run_config(command: str, file_values: Optional[Dict[str, Any]] = None,
                     overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge file values with explicit overrides (dotted keys for sections) and validate"""
    merged: Dict[str, Any] = {k: (dict(v) if isinstance(v, dict) else v)
                              for k, v in (file_values or {}).items()}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            merged.setdefault(section, {})[name] = value
        else:
            merged[key] = value
    merged["command"] = command
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        raise ConfigError(f"invalid configuration at {where or 'top level'}: {first.get('msg')}") from exc
