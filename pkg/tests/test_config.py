"""YAML scenario configs: coercions, deep overrides, and precise diagnostics."""

import numpy as np
import pytest

from branchmpc import config
from branchmpc.config import ConfigError


def test_minimal_config_builds_named_scenario():
    scenario = config.parse_config("scenario: merge\n")
    assert scenario.kind == "merge"
    assert scenario.ramp is not None


def test_builder_shortcuts_are_applied():
    scenario = config.parse_config(
        "scenario: overtake\nalpha: 0.5\nseed: 7\nmode: robust\n"
        "duration: 2.0\nsqp_iterations: 1\nadversary_rule: argmax\n")
    assert scenario.seed == 7
    assert scenario.duration == 2.0
    assert scenario.planner.mode == "robust"
    assert scenario.planner.sqp_iterations == 1
    assert scenario.adversary_rule == "argmax"


def test_deep_overrides_reach_nested_fields_and_arrays():
    scenario = config.parse_config(
        "scenario: overtake\n"
        "overrides:\n"
        "  x0: [0.0, 0.5, 10.0, 0.0]\n"
        "  update_period: 3\n"
        "  planner:\n"
        "    cost:\n"
        "      beta: 50.0\n"
        "    predictor:\n"
        "      eta: 0.4\n")
    assert isinstance(scenario.x0, np.ndarray)
    assert scenario.x0[1] == 0.5
    assert scenario.update_period == 3
    assert scenario.planner.cost.beta == 50.0
    assert scenario.planner.predictor.eta == 0.4


def test_override_none_field_with_builder():
    scenario = config.parse_config(
        "scenario: quadruped-waypoint\n"
        "overrides:\n"
        "  waypoints: [[1.0, 0.0], [2.0, 1.0], [0.0, 0.0]]\n")
    assert scenario.waypoints.shape == (3, 2)


def test_ramp_override_recurses_into_spec():
    scenario = config.parse_config(
        "scenario: merge\noverrides:\n  ramp:\n    x_merge: 50.0\n")
    assert scenario.ramp.x_merge == 50.0
    assert scenario.ramp.v_ref == 10.0  # untouched sibling keeps its value


@pytest.mark.parametrize("source, fragment", [
    ("scenario: [1, 2]\n", "scenario"),
    ("scenario: skydive\n", "skydive"),
    ("alpha: 0.5\n", "scenario"),
    ("scenario: merge\nwarp: 1\n", "warp"),
    ("scenario: merge\nalpha: fast\n", "alpha"),
    ("scenario: merge\nseed: 1.5\n", "seed"),
    ("scenario: merge\nseed: true\n", "seed"),
    ("scenario: merge\nadversary_rule: 3\n", "adversary_rule"),
    ("scenario: merge\noverrides: [1]\n", "overrides"),
    ("scenario: merge\noverrides:\n  nonsense: 1\n", "nonsense"),
    ("scenario: merge\noverrides:\n  planner:\n    cost:\n      beta: soft\n",
     "beta"),
    ("scenario: merge\noverrides:\n  duration: [1]\n", "duration"),
    ("scenario: merge\noverrides:\n  x0: [.nan, 0, 0, 0]\n", "x0"),
    ("scenario: merge\noverrides:\n  seed: true\n", "seed"),
    ("scenario: merge\nalpha: 1.5\n", "alpha"),
])
def test_rejected_configs_name_the_offending_key(source, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config.parse_config(source)


def test_yaml_syntax_error_carries_line_mark():
    with pytest.raises(ConfigError, match="line"):
        config.parse_config("scenario: merge\n  bad_indent: [\n")


def test_empty_config_rejected():
    with pytest.raises(ConfigError, match="empty"):
        config.parse_config("")


def test_top_level_must_be_mapping():
    with pytest.raises(ConfigError, match="mapping"):
        config.parse_config("- merge\n- overtake\n")


def test_override_path_appears_in_message():
    with pytest.raises(ConfigError, match=r"overrides\.planner\.predictor"):
        config.parse_config(
            "scenario: merge\noverrides:\n  planner:\n    predictor:\n"
            "      imaginary: 1\n")
