"""Small helpers for strict JSON config parsing: every key has a default,
unknown keys are hard errors."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError


def check_keys(d: dict, allowed: set[str], context: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown key(s) {sorted(unknown)}; allowed {sorted(allowed)}")


def load_json(path) -> dict:
    p = Path(path)
    try:
        return json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{p}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
