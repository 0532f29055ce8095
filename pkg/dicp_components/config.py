# dicp_components/config.py
"""JSON configuration documents and command-line overrides."""

import copy
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .errors import ConfigError


def load_json_document(path) -> Dict[str, Any]:
    """Load a JSON configuration document.

    Args:
        path: Path to the JSON file, or None for an empty document

    Returns:
        Parsed document (always a dictionary)
    """
    if path is None:
        return {}
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as handle:
            document = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e

    if not isinstance(document, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return document


def apply_overrides(
    document: Mapping[str, Any], overrides: Mapping[str, Any]
) -> Dict[str, Any]:
    """Return a copy of document with dotted-key overrides applied.

    Overrides whose value is None are skipped, so CLI flags the user did not
    pass never clobber values coming from the file.

    Example:
        apply_overrides({"icp": {"max_iterations": 10}},
                        {"icp.max_iterations": 50})
    """
    merged = copy.deepcopy(dict(document))
    for dotted_key, value in overrides.items():
        if value is None:
            continue
        node = merged
        parts = dotted_key.split(".")
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
                node[part] = child
            elif not isinstance(child, dict):
                raise ConfigError(
                    f"Cannot override {dotted_key!r}: {part!r} is not a section"
                )
            node = child
        node[parts[-1]] = value
    return merged


def section(
    document: Mapping[str, Any], name: str, default: Optional[dict] = None
) -> Dict[str, Any]:
    """Pick one named section out of a multi-section document"""
    value = document.get(name, default if default is not None else {})
    if not isinstance(value, dict):
        raise ConfigError(f"Config section {name!r} must be a JSON object")
    return dict(value)


def write_json_document(document: Mapping[str, Any], path) -> Path:
    """Write a JSON document with stable key order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def require_positive(name: str, value, allow_zero: bool = False) -> None:
    """Raise ConfigError unless value is a finite positive number"""
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if number != number or number in (float("inf"), float("-inf")):
        raise ConfigError(f"{name} must be finite, got {value!r}")
    if number < 0 or (number == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ConfigError(f"{name} must be {bound}, got {value!r}")
