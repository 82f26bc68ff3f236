"""Experiment configuration: INI sections per stage, validated against a JSON schema."""
from __future__ import annotations

import configparser
import copy
import json
from typing import Any

import jsonschema

STAGES = ("check", "simulate", "adjoint", "ergodicity", "ebsde", "smp")
PREREQUISITES = {"smp": ("adjoint",)}


class ConfigError(ValueError):
    pass


def _num(default, minimum=None, exclusive=False):
    s: dict[str, Any] = {"type": "number", "default": default}
    if minimum is not None:
        s["exclusiveMinimum" if exclusive else "minimum"] = minimum
    return s


def _int(default, minimum=1):
    return {"type": "integer", "default": default, "minimum": minimum}


def _nums(default, min_items=1):
    return {"type": "array", "items": {"type": "number"}, "default": default, "minItems": min_items}


SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ergolab run configuration",
    "type": "object",
    "required": ["run"],
    "additionalProperties": False,
    "properties": {
        "run": {
            "type": "object",
            "additionalProperties": False,
            "required": ["scenario"],
            "properties": {
                "scenario": {"type": "string"},
                "seed": _int(0, 0),
                "stages": {"type": "array", "items": {"enum": list(STAGES) + ["all"]}, "default": ["all"]},
            },
        },
        "scenario": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
        "check": {"type": "object", "additionalProperties": False, "properties": {
            "box": _nums([-3.0, 3.0], 2), "u_box": _nums([-1.0, 1.0], 2),
            "n_samples": _int(4000), "horizon": _num(1.0, 0, True),
            "convexity_samples": _int(2000)}},
        "simulate": {"type": "object", "additionalProperties": False, "properties": {
            "horizon": _num(5.0, 0, True), "dt": _num(0.01, 0, True), "n_paths": _int(4000),
            "record_every": _int(10), "lra_horizon": _num(100.0, 0, True),
            "lra_burn_in": _num(10.0, 0), "lra_paths": _int(500)}},
        "adjoint": {"type": "object", "additionalProperties": False, "properties": {
            "eval_window": _num(20.0, 0, True), "T_init": _num(2.0, 0, True),
            "growth_factor": _num(1.5, 1, True), "tol": _num(1e-3, 0, True),
            "n_paths": _int(3000), "dt": _num(0.02, 0, True), "x0_spread": _num(1.0, 0),
            "degree": _int(3), "min_comparisons": _int(2), "max_solves": _int(12)}},
        "ergodicity": {"type": "object", "additionalProperties": False, "properties": {
            "t": _num(1.0, 0, True), "n_paths": _int(20000), "dt": _num(0.01, 0, True),
            "pairs": _nums([1.0, -1.0, 3.0, -3.0, 5.0, -5.0], 2), "epochs": _int(6),
            "n_pairs": _int(10000), "ball_radius": _num(0.5, 0, True)}},
        "ebsde": {"type": "object", "additionalProperties": False, "properties": {
            "alphas": _nums([0.4, 0.2, 0.1, 0.05], 3), "n_paths": _int(2000),
            "dt": _num(0.02, 0, True), "lra_horizon": _num(200.0, 0, True),
            "lra_paths": _int(1000), "fh_paths": _int(2000)}},
        "smp": {"type": "object", "additionalProperties": False, "properties": {
            "challengers": _nums([0.2, 0.8, 1.2]), "horizons": _nums([5.0, 10.0, 20.0, 40.0], 2),
            "n_paths": _int(2000), "dt": _num(0.02, 0, True), "cost_horizon": _num(200.0, 0, True),
            "cost_paths": _int(1000), "cost_dt": _num(0.005, 0, True), "tol": _num(0.0, 0)}},
    },
}


def schema_json() -> str:
    """The published schema as stable JSON."""
    return json.dumps(SCHEMA, sort_keys=True, indent=2)


def _coerce(value: str, spec: dict):
    kind = spec.get("type")
    if isinstance(kind, list):
        if value.strip().lower() in ("none", "null", ""):
            return None
        kind = "number"
    try:
        if kind == "integer":
            return int(value)
        if kind == "number":
            return float(value)
        if kind == "array":
            parts = [p.strip() for p in value.replace(";", ",").split(",") if p.strip()]
            if spec["items"].get("type") == "number":
                return [float(p) for p in parts]
            return parts
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r} as {kind}") from exc
    return value.strip()


def _fill_defaults(data: dict) -> dict:
    out = copy.deepcopy(data)
    for section, spec in SCHEMA["properties"].items():
        props = spec.get("properties")
        if props is None:
            out.setdefault(section, {})
            continue
        sec = out.setdefault(section, {})
        for key, kspec in props.items():
            if "default" in kspec and key not in sec:
                sec[key] = copy.deepcopy(kspec["default"])
    return out


def parse_config(text: str) -> dict:
    """Parse INI text into a validated dict with defaults filled in."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    data: dict = {}
    for section in cp.sections():
        spec = SCHEMA["properties"].get(section)
        if spec is None:
            raise ConfigError(f"unknown section [{section}]; allowed: {sorted(SCHEMA['properties'])}")
        props = spec.get("properties", {})
        extra = spec.get("additionalProperties")
        sec = {}
        for key, raw in cp.items(section):
            kspec = props.get(key, extra if isinstance(extra, dict) else None)
            if kspec is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]; allowed: {sorted(props)}")
            sec[key] = _coerce(raw, kspec)
        data[section] = sec
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {path}: {exc.message}") from exc
    return _fill_defaults(data)


def resolve_stages(requested) -> list[str]:
    """Expand ``all``, order the stages and check prerequisites."""
    if not requested:
        raise ConfigError("no stages requested")
    req = set(requested)
    unknown = req - set(STAGES) - {"all"}
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}; choose from {list(STAGES)} or all")
    if "all" in req:
        return list(STAGES)
    ordered = [s for s in STAGES if s in req]
    for s in ordered:
        for pre in PREREQUISITES.get(s, ()):
            if pre not in req:
                raise ConfigError(f"stage {s!r} needs stage {pre!r}; add it to the stage list")
    return ordered
