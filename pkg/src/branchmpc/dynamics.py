"""Continuous agent models, fixed-step discretization, exact affine linearization.

All maps are pure functions over plain numpy vectors; the discrete map is a
single forward-Euler step and its Jacobians are closed-form, so the affine
expansion A x + B u + C reproduces f(x, u) at the expansion point to machine
precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelKind, QUADRUPED, VEHICLE


@dataclass(frozen=True)
class AffineDynamics:
    """Affine expansion of the discrete map about (about_state, about_input)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    about_state: np.ndarray
    about_input: np.ndarray


def _check_dims(state: np.ndarray, inp: np.ndarray, model: ModelKind) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(state, dtype=float)
    u = np.asarray(inp, dtype=float)
    if x.shape != (model.n_x,):
        raise ValueError(f"{model.name} state must have shape ({model.n_x},), got {x.shape}")
    if u.shape != (model.n_u,):
        raise ValueError(f"{model.name} input must have shape ({model.n_u},), got {u.shape}")
    return x, u


def derivative(state: np.ndarray, inp: np.ndarray, model: ModelKind) -> np.ndarray:
    """Continuous-time state derivative of the given model."""
    x, u = _check_dims(state, inp, model)
    if model is VEHICLE or model.name == VEHICLE.name:
        _, _, v, psi = x
        a, r = u
        return np.array([v * np.cos(psi), v * np.sin(psi), a, r])
    if model is QUADRUPED or model.name == QUADRUPED.name:
        psi = x[2]
        vx, vy, r = u
        c, s = np.cos(psi), np.sin(psi)
        return np.array([vx * c - vy * s, vx * s + vy * c, r])
    raise ValueError(f"unknown model kind {model.name!r}")


def step(state: np.ndarray, inp: np.ndarray, dt: float, model: ModelKind) -> np.ndarray:
    """One forward-Euler step of length dt."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x, u = _check_dims(state, inp, model)
    return x + dt * derivative(x, u, model)


def linearize(state: np.ndarray, inp: np.ndarray, dt: float, model: ModelKind) -> AffineDynamics:
    """Exact Jacobians of the discrete Euler map, with offset C = f - A x - B u."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x, u = _check_dims(state, inp, model)
    if model.name == VEHICLE.name:
        v, psi = x[2], x[3]
        c, s = np.cos(psi), np.sin(psi)
        A = np.eye(4)
        A[0, 2] = dt * c
        A[0, 3] = -dt * v * s
        A[1, 2] = dt * s
        A[1, 3] = dt * v * c
        B = np.zeros((4, 2))
        B[2, 0] = dt
        B[3, 1] = dt
    elif model.name == QUADRUPED.name:
        psi = x[2]
        vx, vy = u[0], u[1]
        c, s = np.cos(psi), np.sin(psi)
        A = np.eye(3)
        A[0, 2] = dt * (-vx * s - vy * c)
        A[1, 2] = dt * (vx * c - vy * s)
        B = np.zeros((3, 3))
        B[0, 0] = dt * c
        B[0, 1] = -dt * s
        B[1, 0] = dt * s
        B[1, 1] = dt * c
        B[2, 2] = dt
    else:
        raise ValueError(f"unknown model kind {model.name!r}")
    f = step(x, u, dt, model)
    C = f - A @ x - B @ u
    return AffineDynamics(A=A, B=B, C=C, about_state=x, about_input=u)
