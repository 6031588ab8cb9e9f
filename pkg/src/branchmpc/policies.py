"""Finite policy set for the uncontrolled agent: feedback laws and rollouts.

Every law reads only the uncontrolled agent's own state. Lateral regulation is
a saturated proportional cascade: lateral error sets a commanded heading, the
heading error sets the yaw rate. Outputs are clamped to the agent's input box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .models import ModelKind, QUADRUPED, VEHICLE

POLICY_KINDS = ("maintain-speed", "slow-down", "lane-change", "constant-forward", "stop")

_VEHICLE_DEFAULTS = {
    "v_nominal": 12.0,   # m/s
    "k_speed": 0.8,      # 1/s, P gain on speed error
    "k_lat": 0.25,       # rad/m, lateral error to commanded heading
    "k_heading": 2.0,    # 1/s, heading error to yaw rate
    "psi_cmd_max": 0.3,  # rad, commanded-heading saturation
    "y_target": 0.0,     # m, lane center the law regulates to
    "decel": 3.0,        # m/s^2, slow-down rate
    "v_floor": 0.0,      # m/s, slow-down floor speed
}

_QUADRUPED_DEFAULTS = {
    "v_nominal": 0.4,    # m/s
    "heading": None,     # rad; None keeps the current heading uncorrected
    "k_heading": 1.0,
}


@dataclass(frozen=True)
class Policy:
    id: int
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    def param(self, name: str, model: ModelKind):
        if name in self.params:
            return self.params[name]
        defaults = _VEHICLE_DEFAULTS if model.name == VEHICLE.name else _QUADRUPED_DEFAULTS
        return defaults[name]


@dataclass(frozen=True)
class PolicySet:
    policies: tuple[Policy, ...]
    model: ModelKind
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        if len(self.policies) < 1:
            raise ValueError("policy set must contain at least one policy")
        for i, p in enumerate(self.policies):
            if p.id != i:
                raise ValueError(f"policy ids must be 0..m-1 in order, got id {p.id} at position {i}")
        object.__setattr__(self, "u_min", np.asarray(self.u_min, dtype=float))
        object.__setattr__(self, "u_max", np.asarray(self.u_max, dtype=float))
        if self.u_min.shape != (self.model.n_u,) or self.u_max.shape != (self.model.n_u,):
            raise ValueError("input box must match the model input dimension")
        if np.any(self.u_min > self.u_max):
            raise ValueError("input box is empty")

    def __len__(self) -> int:
        return len(self.policies)


def _lane_keeping_rate(z: np.ndarray, y_target: float, k_lat: float, k_heading: float,
                       psi_cmd_max: float) -> float:
    psi_cmd = np.clip(-k_lat * (z[1] - y_target), -psi_cmd_max, psi_cmd_max)
    return k_heading * (psi_cmd - z[3])


def policy_input(pset: PolicySet, policy_id: int, z: np.ndarray, dt: float) -> np.ndarray:
    """Evaluate the feedback law d = pi(z), clamped to the input box.

    dt is needed so rate-limited laws saturate exactly at their floor instead
    of overshooting it under Euler integration.
    """
    model = pset.model
    z = np.asarray(z, dtype=float)
    if z.shape != (model.n_x,):
        raise ValueError(f"state shape {z.shape} does not match model {model.name}")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    policy = pset.policies[policy_id]
    kind = policy.kind
    p = lambda name: policy.param(name, model)
    if model.name == VEHICLE.name:
        if kind in ("maintain-speed", "lane-change"):
            # lane-change is lane keeping retargeted to the adjacent lane center
            a = p("k_speed") * (p("v_nominal") - z[2])
        elif kind == "slow-down":
            # exact saturation: v+ = max(v_floor, v - dt*decel)
            a = max(-p("decel"), (p("v_floor") - z[2]) / dt)
        else:
            raise ValueError(f"policy kind {kind!r} is not a vehicle policy")
        r = _lane_keeping_rate(z, p("y_target"), p("k_lat"), p("k_heading"), p("psi_cmd_max"))
        u = np.array([a, r])
    elif model.name == QUADRUPED.name:
        if kind == "constant-forward":
            heading = p("heading")
            r = 0.0 if heading is None else p("k_heading") * (heading - z[2])
            u = np.array([p("v_nominal"), 0.0, r])
        elif kind == "stop":
            u = np.zeros(3)
        else:
            raise ValueError(f"policy kind {kind!r} is not a quadruped policy")
    else:
        raise ValueError(f"unknown model kind {model.name!r}")
    return np.clip(u, pset.u_min, pset.u_max)


def rollout(pset: PolicySet, policy_id: int, z0: np.ndarray, steps: int, dt: float) -> np.ndarray:
    """Iterate the closed loop z+ = f(z, pi(z)); returns (steps+1, n_x) starting at z0."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    z = np.asarray(z0, dtype=float)
    out = np.empty((steps + 1, pset.model.n_x))
    out[0] = z
    for k in range(steps):
        u = policy_input(pset, policy_id, z, dt)
        z = dynamics.step(z, u, dt, pset.model)
        out[k + 1] = z
    return out
