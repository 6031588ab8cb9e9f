"""Agent model kinds and their vector layouts.

Vehicle state: [X, Y, v, psi] (longitudinal m, lateral m, speed m/s, heading rad),
input [a, r] (acceleration m/s^2, yaw rate rad/s).

Quadruped state: [X, Y, psi], input [vx, vy, r] (body-frame longitudinal and
lateral velocity m/s, yaw rate rad/s).

Headings are stored unwrapped: no modular reduction anywhere, so successive
linearizations stay continuous.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ModelKind:
    name: str
    n_x: int
    n_u: int


VEHICLE = ModelKind("vehicle", n_x=4, n_u=2)
QUADRUPED = ModelKind("quadruped", n_x=3, n_u=3)

_BY_NAME = {m.name: m for m in (VEHICLE, QUADRUPED)}


def model_by_name(name: str) -> ModelKind:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ValueError(f"unknown model kind {name!r}; expected one of {sorted(_BY_NAME)}")
