"""Scenario configuration files: strict YAML with path-precise diagnostics.

A config names a scenario builder and optionally adjusts it at two levels:

```yaml
scenario: overtake        # overtake | merge | quadruped-waypoint   (required)
alpha: 0.9                # builder shortcuts, same knobs the CLI exposes
seed: 7
mode: branch              # branch | robust
duration: 20.0
sqp_iterations: 2
adversary_rule: argmax    # sample | argmax | teleop
overrides:                # deep field-level overrides, applied after the builder
  update_period: 4
  planner:
    M: 6
    cost: {beta: 150.0}
    predictor:
      eta: 0.25
      safety: {tau: 0.05}
```

`overrides` reaches every field of the scenario and planner configuration by
name; nested sections mirror the dataclass structure (`planner`, `planner.cost`,
`planner.predictor`, `planner.predictor.safety`, `planner.predictor.policies`,
`planner.risk`, `planner.solver`, `ramp`). Matrices and vectors are given as
(nested) lists. Unknown keys are rejected with the offending path.
"""

from __future__ import annotations

import dataclasses
import io

import numpy as np
import yaml

from . import sim
from .models import ModelKind, model_by_name
from .policies import Policy
from .sim import RampSpec, ScenarioConfig

BUILDER_KEYS = ("alpha", "seed", "mode", "duration", "sqp_iterations")
TOP_LEVEL_KEYS = ("scenario",) + BUILDER_KEYS + ("adversary_rule", "overrides")


class ConfigError(ValueError):
    """Malformed configuration; the message carries the key path or YAML mark."""


def load_config(path) -> ScenarioConfig:
    """Parse a YAML scenario file into a validated ScenarioConfig."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh, name=str(path))


def parse_config(source, *, name: str = "<config>") -> ScenarioConfig:
    """Parse YAML text (or a readable stream) into a validated ScenarioConfig."""
    if isinstance(source, str):
        source = io.StringIO(source)
    try:
        mapping = yaml.safe_load(source)
    except yaml.YAMLError as exc:  # marked errors carry line/column
        raise ConfigError(f"{name}: {exc}") from exc
    if mapping is None:
        raise ConfigError(f"{name}: empty config")
    if not isinstance(mapping, dict):
        raise ConfigError(f"{name}: top level must be a mapping")
    return scenario_from_mapping(mapping, name=name)


def scenario_from_mapping(mapping: dict, *, name: str = "<config>") -> ScenarioConfig:
    """Build a scenario from a parsed mapping (shared by files and wire messages)."""
    unknown = set(mapping) - set(TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"{name}: unknown key {sorted(unknown)[0]!r} "
                          f"(valid: {sorted(TOP_LEVEL_KEYS)})")
    if "scenario" not in mapping:
        raise ConfigError(f"{name}: missing required key 'scenario'")
    kind = mapping["scenario"]
    if not isinstance(kind, str) or kind not in sim.SCENARIOS:
        raise ConfigError(f"{name}: scenario must be one of "
                          f"{sorted(sim.SCENARIOS)}, got {kind!r}")
    shortcut_types = {"alpha": (int, float), "seed": (int,), "mode": (str,),
                      "duration": (int, float), "sqp_iterations": (int,),
                      "adversary_rule": (str,)}
    for key, accepted in shortcut_types.items():
        if key in mapping:
            value = mapping[key]
            if isinstance(value, bool) or not isinstance(value, accepted):
                wanted = "/".join(t.__name__ for t in accepted)
                raise ConfigError(f"{name}: {key} must be {wanted}, "
                                  f"got {value!r}")
    kwargs = {key: mapping[key] for key in BUILDER_KEYS + ("adversary_rule",)
              if key in mapping}
    try:
        scenario = sim.SCENARIOS[kind](**kwargs)
        overrides = mapping.get("overrides") or {}
        if not isinstance(overrides, dict):
            raise ConfigError(f"{name}: overrides must be a mapping")
        return _replace_dataclass(scenario, overrides, f"{name}: overrides.")
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


# ---------------------------------------------------------------------------
# Deep dataclass overrides
# ---------------------------------------------------------------------------

# fields whose default is None, so the target type cannot be inferred from the
# current value
_NONE_FIELD_BUILDERS = {
    "ramp": lambda value, path: _ramp_from(value, path),
    "waypoints": lambda value, path: np.asarray(value, dtype=float),
    "S": lambda value, path: np.asarray(value, dtype=float),
}


def _ramp_from(value, path: str) -> RampSpec:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping for the ramp")
    return _build_dataclass(RampSpec, value, path + ".")


def _build_dataclass(cls, mapping: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(f"{path}{sorted(unknown)[0]}: unknown key "
                          f"(valid: {sorted(names)})")
    return cls(**mapping)


def _replace_dataclass(obj, overrides: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in overrides.items():
        if key not in fields:
            raise ConfigError(f"{path}{key}: unknown key (valid: {sorted(fields)})")
        changes[key] = _coerce(getattr(obj, key), value, f"{path}{key}", key)
    return dataclasses.replace(obj, **changes)


def _coerce(current, value, path: str, field_name: str):
    if current is None:
        builder = _NONE_FIELD_BUILDERS.get(field_name)
        if builder is None:
            raise ConfigError(f"{path}: this field cannot be set from a config")
        return builder(value, path)
    if isinstance(current, ModelKind):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a model name string")
        return model_by_name(value)
    if dataclasses.is_dataclass(current):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _replace_dataclass(current, value, path + ".")
    if isinstance(current, np.ndarray):
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"{path}: values must be finite")
        return arr
    if isinstance(current, tuple) and current and isinstance(current[0], Policy):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list of policy mappings")
        return tuple(_build_dataclass(Policy, entry, f"{path}[{i}].")
                     for i, entry in enumerate(value))
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: this field cannot be set from a config")
