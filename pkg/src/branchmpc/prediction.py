"""Safety margins and the softmax policy predictor, with analytic gradients.

The margin h aggregates per-step clearance and the uncontrolled agent's lane
bounds with a smooth minimum; policy probabilities are a softmax of saturated
margins. Gradients are taken with respect to the planned ego trajectories so
the planner can differentiate branch weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _kernels as kern
from .policies import PolicySet

GEOMETRIES = ("box", "circle")


@dataclass(frozen=True)
class SafetySpec:
    dx_max: float       # longitudinal clearance (m)
    dy_max: float       # lateral clearance (m)
    y_min: float        # lane bounds for the uncontrolled agent (m)
    y_max: float
    psi_min: float      # heading bounds, used by the ego planner (rad)
    psi_max: float
    kappa: float = 10.0  # clearance-field sharpness
    tau: float = 0.1     # smooth-min temperature

    def __post_init__(self):
        if min(self.dx_max, self.dy_max, self.kappa, self.tau) <= 0.0:
            raise ValueError("dx_max, dy_max, kappa, tau must be positive")
        if self.y_min >= self.y_max:
            raise ValueError("lane bounds must satisfy y_min < y_max")
        if self.psi_min >= self.psi_max:
            raise ValueError("heading bounds must satisfy psi_min < psi_max")


@dataclass(frozen=True)
class PredictiveModel:
    policies: PolicySet
    safety: SafetySpec
    eta: float = 1.0          # margin saturation level
    horizon: int = 8          # rollout steps compared per branching node
    geometry: str = "box"     # "box" lanes+clearance, "circle" clearance only
    hard_saturation: bool = False  # exact min{h, eta} instead of the smooth one
    gain: float = 1.0         # softmax sharpness (units-of-h scale)

    def __post_init__(self):
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"geometry must be one of {GEOMETRIES}")
        if self.gain <= 0.0:
            raise ValueError("gain must be positive")


def collision_value(x: np.ndarray, z: np.ndarray, spec: SafetySpec) -> float:
    """Normalized box clearance between two agents; >= 1 means clear."""
    vals, _ = kern.box_collision(np.asarray(x, float)[None, :2], np.asarray(z, float)[None, :2],
                                 spec.dx_max, spec.dy_max, spec.kappa)
    return float(vals[0])


def circular_collision_value(x: np.ndarray, z: np.ndarray, spec: SafetySpec) -> float:
    """Circular clearance analogue used when there are no lanes; radius = dx_max."""
    vals, _ = kern.circle_collision(np.asarray(x, float)[None, :2], np.asarray(z, float)[None, :2],
                                    spec.dx_max)
    return float(vals[0])


def _margin_constituents(x_traj: np.ndarray, z_traj: np.ndarray, spec: SafetySpec,
                         geometry: str):
    """Per-step margin terms and the ego-position gradient of the clearance ones.

    Returns (values (C,), grads (T, 2), n_per_step) where the first T entries
    of values are the clearance margins (aligned with grads) and the rest do
    not depend on the ego trajectory.
    """
    exy = np.ascontiguousarray(x_traj[:, :2], dtype=float)
    zxy = np.ascontiguousarray(z_traj[:, :2], dtype=float)
    if geometry == "box":
        cvals, cgrads = kern.box_collision(exy, zxy, spec.dx_max, spec.dy_max, spec.kappa)
        zy = z_traj[:, 1]
        # lane margins normalized by the lateral clearance so all terms are
        # commensurate with the dimensionless clearance margin
        lo = (zy - spec.y_min) / spec.dy_max
        hi = (spec.y_max - zy) / spec.dy_max
        values = np.concatenate([cvals - 1.0, lo, hi])
    elif geometry == "circle":
        cvals, cgrads = kern.circle_collision(exy, zxy, spec.dx_max)
        values = cvals - 1.0
    else:
        raise ValueError(f"geometry must be one of {GEOMETRIES}")
    return values, cgrads


def safety_margin(x_traj: np.ndarray, z_traj: np.ndarray, spec: SafetySpec,
                  geometry: str = "box") -> float:
    """Smooth minimum of all per-step margins; positive iff approximately safe."""
    h, _ = safety_margin_grad(x_traj, z_traj, spec, geometry)
    return h


def safety_margin_grad(x_traj: np.ndarray, z_traj: np.ndarray, spec: SafetySpec,
                       geometry: str = "box") -> tuple[float, np.ndarray]:
    """safety_margin plus its gradient w.r.t. the ego positions, shape (T, 2)."""
    x_traj = np.asarray(x_traj, dtype=float)
    z_traj = np.asarray(z_traj, dtype=float)
    if x_traj.ndim != 2 or z_traj.ndim != 2 or x_traj.shape[0] != z_traj.shape[0]:
        raise ValueError("trajectories must be 2-d with equal lengths")
    T = x_traj.shape[0]
    values, cgrads = _margin_constituents(x_traj, z_traj, spec, geometry)
    h, weights = kern.smooth_min(values, spec.tau)
    grad = weights[:T, None] * cgrads
    return float(h), grad


def saturate(h: float, eta: float, tau: float, hard: bool = False) -> tuple[float, float]:
    """min{h, eta}, smoothed with temperature tau unless hard; returns (value, d/dh)."""
    if hard:
        return (h, 1.0) if h < eta else (eta, 0.0)
    m = min(h, eta)
    s = m - tau * np.log(np.exp((m - h) / tau) + np.exp((m - eta) / tau))
    return float(s), float(expit((eta - h) / tau))


def policy_probabilities(margins: np.ndarray, eta: float, tau: float,
                         hard: bool = False, gain: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Softmax of gain-scaled saturated margins.

    Returns (p, d(gain * saturated)/d(margin)); gain sets how sharply margin
    differences translate into probability differences.
    """
    margins = np.asarray(margins, dtype=float)
    s = np.empty_like(margins)
    ds = np.empty_like(margins)
    for j, hj in enumerate(margins):
        s[j], ds[j] = saturate(float(hj), eta, tau, hard)
    ex = np.exp(gain * (s - np.max(s)))
    return ex / np.sum(ex), gain * ds


@dataclass(frozen=True)
class BranchProbabilities:
    p: np.ndarray        # (m,) simplex point
    margins: np.ndarray  # (m,) raw margins h_i
    jac: np.ndarray      # (m, m, T, 2): d p_i / d (x_j at step t, position)


def branch_probabilities(x_children: list, z_children: list,
                         model: PredictiveModel) -> BranchProbabilities:
    """Policy probabilities at a branching node, with ego-trajectory Jacobians."""
    m = len(model.policies)
    if len(x_children) != m or len(z_children) != m:
        raise ValueError(f"expected {m} trajectory pairs, got {len(x_children)}/{len(z_children)}")
    T = model.horizon
    h = np.empty(m)
    grads = np.empty((m, T, 2))
    for j in range(m):
        xj = np.asarray(x_children[j], dtype=float)
        zj = np.asarray(z_children[j], dtype=float)
        if xj.shape[0] < T or zj.shape[0] < T:
            raise ValueError(f"trajectory pair {j} shorter than the horizon {T}")
        h[j], grads[j] = safety_margin_grad(xj[:T], zj[:T], model.safety, model.geometry)
    p, ds = policy_probabilities(h, model.eta, model.safety.tau, model.hard_saturation,
                                 model.gain)
    # d p_i / d x_j = p_i (delta_ij - p_j) * ds_j * dh_j/dx_j
    coeff = (np.diag(p) - np.outer(p, p)) * ds[None, :]
    jac = coeff[:, :, None, None] * grads[None, :, :, :]
    return BranchProbabilities(p=p, margins=h, jac=jac)
