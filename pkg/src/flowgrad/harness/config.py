"""Scenario configuration: schema, validating loader and typed accessors.

A scenario file (TOML or JSON) names one flow and any number of estimation,
oracle, audit and martingale requests.  Estimation and oracle requests carry
an explicit tolerance, and estimation requests an explicit seed and path
budget, so a run never draws entropy or guesses an acceptance threshold.
"""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on Python 3.10
    import tomli as tomllib

from ..flows import FAMILIES, FlowConfig

SCHEMA_VERSION = 1

_vector = {"type": "array", "items": {"type": "number"}, "minItems": 1, "maxItems": 3}
_directions = {
    "oneOf": [
        {"type": "array", "items": {"type": "number"}, "minItems": 1},
        {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 1},
         "minItems": 1},
    ]
}

FLOW_SCHEMA = {
    "type": "object",
    "required": ["family", "T", "dt"],
    "additionalProperties": False,
    "properties": {
        "family": {"enum": list(FAMILIES)},
        "initial": {"type": "object"},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "resolution": {"type": "array", "items": {"type": "integer", "minimum": 16},
                       "minItems": 1, "maxItems": 3},
        "periods": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "forcing": {},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "ceiling": {"type": "number", "exclusiveMinimum": 0},
        "solver_dt": {"type": "number", "exclusiveMinimum": 0},
        "n": {"type": "integer", "minimum": 1, "maximum": 3},
        "radius": {"type": "number", "exclusiveMinimum": 0},
    },
}

ESTIMATE_SCHEMA = {
    "type": "object",
    "required": ["x0", "v", "mode", "paths", "dt", "seed", "tolerance"],
    "additionalProperties": False,
    "properties": {
        "x0": _vector,
        "v": _directions,
        "mode": {"enum": ["global", "local"]},
        "paths": {"type": "integer", "minimum": 2},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "tolerance": {"type": "number", "exclusiveMinimum": 0,
                      "description": "allowed oracle discrepancy in standard errors"},
        "order": {"enum": [1, 2]},
        "r": {"type": "number", "exclusiveMinimum": 0},
        "oracle": {"type": "boolean"},
    },
}

ORACLE_SCHEMA = {
    "type": "object",
    "required": ["x0", "order", "tolerance"],
    "additionalProperties": False,
    "properties": {
        "x0": _vector,
        "order": {"enum": [1, 2]},
        "tolerance": {"type": "number", "exclusiveMinimum": 0},
        "t": {"type": "number", "minimum": 0},
    },
}

AUDIT_SCHEMA = {
    "type": "object",
    "required": ["tag", "x0", "r"],
    "additionalProperties": False,
    "properties": {
        "tag": {"type": "string"},
        "x0": _vector,
        "r": {"type": "number", "exclusiveMinimum": 0},
        "ceiling": {"type": "number", "exclusiveMinimum": 0},
    },
}

MARTINGALE_SCHEMA = {
    "type": "object",
    "required": ["x0", "v", "paths", "seed", "level"],
    "additionalProperties": False,
    "properties": {
        "x0": _vector,
        "v": _directions,
        "paths": {"type": "integer", "minimum": 100},
        "seed": {"type": "integer", "minimum": 0},
        "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "fault_injection": {"type": "boolean"},
    },
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "flow"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "output": {"type": "string"},
        "flow": FLOW_SCHEMA,
        "estimate": {"type": "array", "items": ESTIMATE_SCHEMA},
        "oracle": {"type": "array", "items": ORACLE_SCHEMA},
        "audit": {"type": "array", "items": AUDIT_SCHEMA},
        "martingale": {"type": "array", "items": MARTINGALE_SCHEMA},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fractions": {"type": "array", "items": {"type": "number"}, "minItems": 2},
                "min_slope": {"type": "number"},
            },
        },
    },
}


class ConfigError(ValueError):
    """A scenario file violates the schema; ``errors`` lists field-level messages."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _field_path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    return ".".join(parts) or "<root>"


def validate_scenario(data: dict) -> dict:
    """Validate a parsed scenario; raise :class:`ConfigError` naming each bad field."""
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError([f"{_field_path(e)}: {e.message}" for e in errors])
    return data


def read_document(path) -> dict:
    """Parse a TOML or JSON document by extension."""
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"<file>: {exc}"]) from exc


def load_scenario(path) -> dict:
    """Read and validate a scenario file."""
    return validate_scenario(read_document(path))


def load_flow_table(path) -> dict:
    """Flow settings from either a scenario file or a bare flow table."""
    data = read_document(path)
    if "flow" in data:
        return validate_scenario(data)["flow"]
    validator = jsonschema.Draft202012Validator(FLOW_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError([f"{_field_path(e)}: {e.message}" for e in errors])
    return data


def flow_config_from(table: dict) -> FlowConfig:
    kw = dict(table)
    if "resolution" in kw:
        kw["resolution"] = tuple(kw["resolution"])
    if "periods" in kw:
        kw["periods"] = tuple(kw["periods"])
    kw.setdefault("initial", {"preset": "flat"})
    return FlowConfig(**kw)
