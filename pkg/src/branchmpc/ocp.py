"""Trajectory-tree optimal control: subproblem assembly and the SQP loop.

Each planning step linearizes dynamics and clearance constraints around the
incumbent trajectory tree, freezes the branch weights (and their state
gradients) there, and solves one convex subproblem per SQP iteration:

- expectation objective -> a QP over tree states, inputs, and hinge slacks,
  with the weight-gradient linear term capturing how plans influence which
  branch gets realized;
- CVaR objective -> an SOCP adding per-branch cost epigraphs (rotated cones)
  and the dual multipliers of the nested-risk recursion.

Constraint softening uses one nonnegative slack per constraint row penalized
linearly, so every subproblem is feasible by construction and the penalty
reproduces the hinge exactly at the optimum.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels as kern
from . import dynamics, prediction
from . import risk as risk_mod
from . import tree as tree_mod
from .conic.program import ConicProgram, SecondOrderCone
from .conic.solver import Settings, solve
from .models import ModelKind
from .tree import ScenarioTree, TrajectoryTree, WeightInfo

_N_BOUND_ROWS = 4  # lane low/high, heading low/high; collision rows come after


def _heading_index(model: ModelKind) -> int:
    return 3 if model.name == "vehicle" else 2


@dataclass(frozen=True)
class CostSpec:
    """Quadratic tracking cost with linear hinge penalty and proximal damping.

    Tracking error is S x - x_ref (S defaults to the identity, so x_ref is a
    plain state reference); beta prices constraint violations, omega damps the
    SQP step via a squared distance to the linearization point.
    """

    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray
    S: np.ndarray | None = None
    beta: float = 100.0
    omega: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float).ravel())
        if self.S is not None:
            object.__setattr__(self, "S", np.asarray(self.S, dtype=float))
        for name in ("Q", "R"):
            M = getattr(self, name)
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(M, M.T, atol=1e-10):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-9 * max(1.0, np.abs(M).max()):
                raise ValueError(f"{name} must be positive semidefinite")
        if self.Q.shape[0] != self.x_ref.shape[0]:
            raise ValueError("Q and x_ref disagree on the output dimension")
        if self.S is not None and self.S.shape[0] != self.Q.shape[0]:
            raise ValueError("S rows must match the Q dimension")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.omega < 0.0:
            raise ValueError("omega must be nonnegative")

    def output_map(self, n_x: int) -> np.ndarray:
        if self.S is None:
            if self.Q.shape[0] != n_x:
                raise ValueError("Q dimension must match the state when S is omitted")
            return np.eye(n_x)
        if self.S.shape[1] != n_x:
            raise ValueError("S columns must match the state dimension")
        return self.S


@dataclass(frozen=True)
class PlannerConfig:
    """Everything a planning step needs besides the current states."""

    model: ModelKind
    m: int
    M: int
    depth: int
    dt: float
    cost: CostSpec
    predictor: prediction.PredictiveModel
    u_min: np.ndarray
    u_max: np.ndarray
    risk: risk_mod.RiskSpec = field(default_factory=risk_mod.RiskSpec)
    sqp_iterations: int = 3
    mode: str = "branch"  # "branch" or "robust" (single-trajectory baseline)
    cvar_p_correction: bool = False
    solver: Settings = field(default_factory=Settings)
    step_tolerance: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "u_min", np.asarray(self.u_min, dtype=float).ravel())
        object.__setattr__(self, "u_max", np.asarray(self.u_max, dtype=float).ravel())
        if self.sqp_iterations < 1:
            raise ValueError("sqp_iterations must be >= 1")
        if self.mode not in ("branch", "robust"):
            raise ValueError(f"mode must be 'branch' or 'robust', got {self.mode!r}")
        if self.m != len(self.predictor.policies):
            raise ValueError("m must equal the number of policies in the predictor")
        if self.predictor.horizon > self.M:
            raise ValueError("predictor horizon cannot exceed the branch length M")
        if self.u_min.shape != (self.model.n_u,) or self.u_max.shape != (self.model.n_u,):
            raise ValueError("input bounds must match the model input dimension")
        if np.any(self.u_min >= self.u_max):
            raise ValueError("u_min must be elementwise below u_max")
        self.cost.output_map(self.model.n_x)  # dimension check

    @property
    def safety(self) -> prediction.SafetySpec:
        return self.predictor.safety


# ---------------------------------------------------------------------------
# Nonlinear constraint rows and the extended branch cost
# ---------------------------------------------------------------------------

def _collision_values(x: np.ndarray, z: np.ndarray, safety: prediction.SafetySpec,
                      geometry: str) -> tuple[np.ndarray, np.ndarray]:
    exy = np.ascontiguousarray(x[:, :2])
    zxy = np.ascontiguousarray(np.asarray(z, dtype=float)[:, :2])
    if geometry == "box":
        return kern.box_collision(exy, zxy, safety.dx_max, safety.dy_max, safety.kappa)
    return kern.circle_collision(exy, zxy, safety.dx_max)


def constraint_values(x: np.ndarray, z_list: list[np.ndarray],
                      safety: prediction.SafetySpec, model: ModelKind,
                      geometry: str = "box") -> np.ndarray:
    """Stacked c(x) <= 0 rows per node: lane, heading, then one clearance row
    per adversary trajectory (violated when the clearance field drops below 1)."""
    x = np.asarray(x, dtype=float)
    L = x.shape[0]
    hi = _heading_index(model)
    rows = np.empty((L, _N_BOUND_ROWS + len(z_list)))
    rows[:, 0] = safety.y_min - x[:, 1]
    rows[:, 1] = x[:, 1] - safety.y_max
    rows[:, 2] = safety.psi_min - x[:, hi]
    rows[:, 3] = x[:, hi] - safety.psi_max
    for c, z in enumerate(z_list):
        vals, _ = _collision_values(x, z, safety, geometry)
        rows[:, _N_BOUND_ROWS + c] = 1.0 - vals
    return rows


def extended_cost(x: np.ndarray, z, u: np.ndarray, cost: CostSpec,
                  safety: prediction.SafetySpec, model: ModelKind,
                  geometry: str = "box") -> float:
    """Tracking + input cost over one branch plus beta times the summed hinge
    of its constraint violations. z may be one rollout or a list of rollouts."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    z_list = [z] if isinstance(z, np.ndarray) else list(z)
    S = cost.output_map(model.n_x)
    err = x @ S.T - cost.x_ref
    J = float(np.einsum("ki,ij,kj->", err, cost.Q, err)
              + np.einsum("ki,ij,kj->", u, cost.R, u))
    viol = constraint_values(x, z_list, safety, model, geometry)
    return J + cost.beta * float(np.clip(viol, 0.0, None).sum())


# ---------------------------------------------------------------------------
# Linearization bundle
# ---------------------------------------------------------------------------

@dataclass
class LinearizationBundle:
    """Everything frozen at the linearization point x-hat for one subproblem."""

    tree: ScenarioTree
    traj: TrajectoryTree                    # the linearization point
    model: ModelKind
    geometry: str
    A: list[np.ndarray]                     # (L-1, n_x, n_x) in-branch
    B: list[np.ndarray]
    C: list[np.ndarray]
    link: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]  # non-leaf id -> step into the shared child node
    z_sets: list[list[np.ndarray]]          # adversary rollouts constrained per branch
    col_val: list[np.ndarray]               # (n_col, L) clearance values at x-hat
    col_grad: list[np.ndarray]              # (n_col, L, 2)
    weights: WeightInfo
    predictor: prediction.PredictiveModel

    @property
    def n_con(self) -> list[int]:
        return [_N_BOUND_ROWS + len(zs) for zs in self.z_sets]


def _linearize_model(xs: np.ndarray, us: np.ndarray, dt: float, model: ModelKind):
    if model.name == "vehicle":
        return kern.vehicle_linearize_batch(xs, us, dt)
    return kern.quadruped_linearize_batch(xs, us, dt)


def linearize_tree(tree: ScenarioTree, traj: TrajectoryTree,
                   predictor: prediction.PredictiveModel, model: ModelKind,
                   dt: float, weights: WeightInfo,
                   z_sets: list[list[np.ndarray]] | None = None) -> LinearizationBundle:
    """Linearize dynamics and clearance constraints about traj.

    z_sets overrides the constrained adversary rollouts per branch; by default
    each branch is constrained against its own scenario rollout.
    """
    if z_sets is None:
        z_sets = [[b.z] for b in tree.branches]
    if len(z_sets) != tree.n_branches:
        raise ValueError("need one adversary rollout list per branch")
    safety, geometry = predictor.safety, predictor.geometry
    A, B, C, link = [], [], [], {}
    col_val, col_grad = [], []
    for b in tree.branches:
        x, u = traj.x[b.id], traj.u[b.id]
        if x.shape[0] != b.length or len(z_sets[b.id]) == 0:
            raise ValueError(f"bundle inputs inconsistent at branch {b.id}")
        for z in z_sets[b.id]:
            if np.asarray(z).shape[0] != b.length:
                raise ValueError(f"adversary rollout length mismatch at branch {b.id}")
        Ab, Bb, Cb = _linearize_model(x[:-1], u[:-1], dt, model)
        A.append(Ab)
        B.append(Bb)
        C.append(Cb)
        if not b.is_leaf:
            Al, Bl, Cl = _linearize_model(x[-1:], u[-1:], dt, model)
            link[b.id] = (Al[0], Bl[0], Cl[0])
        vals = np.empty((len(z_sets[b.id]), b.length))
        grads = np.empty((len(z_sets[b.id]), b.length, 2))
        for c, z in enumerate(z_sets[b.id]):
            vals[c], grads[c] = _collision_values(x, z, safety, geometry)
        col_val.append(vals)
        col_grad.append(grads)
    return LinearizationBundle(tree=tree, traj=traj, model=model, geometry=geometry,
                               A=A, B=B, C=C, link=link, z_sets=z_sets,
                               col_val=col_val, col_grad=col_grad, weights=weights,
                               predictor=predictor)


# ---------------------------------------------------------------------------
# Variable layout
# ---------------------------------------------------------------------------

@dataclass
class VarLayout:
    """Column indexing of one subproblem's decision vector.

    Order: slot states, per-branch inputs, per-branch slacks, then (CVaR only)
    cost epigraphs t, risk values gamma, equality multipliers sigma, and the
    sign-constrained multiplier pairs mu+/mu-.
    """

    n_slots: int
    n_x: int
    n_u: int
    lengths: list[int]
    n_con: list[int]
    nonleaf: list[int]
    m: int
    cvar: bool

    def __post_init__(self):
        self.n_states = self.n_slots * self.n_x
        self._u_off = np.concatenate(([0], np.cumsum(self.lengths))) * self.n_u
        slack_sizes = [L * c for L, c in zip(self.lengths, self.n_con)]
        self._s_off = np.concatenate(([0], np.cumsum(slack_sizes)))
        self.off_u = self.n_states
        self.off_s = self.off_u + int(self._u_off[-1])
        self.off_t = self.off_s + int(self._s_off[-1])
        self._nl_pos = {bid: k for k, bid in enumerate(self.nonleaf)}
        nb = len(self.lengths)
        nnl = len(self.nonleaf)
        if self.cvar:
            self.off_gamma = self.off_t + nb
            self.off_sigma = self.off_gamma + nnl
            self.off_mu_plus = self.off_sigma + nnl
            self.off_mu_minus = self.off_mu_plus + nnl * self.m
            self.n = self.off_mu_minus + nnl * self.m
        else:
            self.n = self.off_t

    def state(self, slot: int) -> slice:
        return slice(slot * self.n_x, (slot + 1) * self.n_x)

    def input(self, branch: int, k: int) -> slice:
        base = self.off_u + int(self._u_off[branch]) + k * self.n_u
        return slice(base, base + self.n_u)

    def slack(self, branch: int, k: int) -> slice:
        base = self.off_s + int(self._s_off[branch]) + k * self.n_con[branch]
        return slice(base, base + self.n_con[branch])

    def slack_block(self, branch: int) -> slice:
        return slice(self.off_s + int(self._s_off[branch]),
                     self.off_s + int(self._s_off[branch + 1]))

    def t(self, branch: int) -> int:
        return self.off_t + branch

    def gamma(self, branch: int) -> int:
        return self.off_gamma + self._nl_pos[branch]

    def sigma(self, branch: int) -> int:
        return self.off_sigma + self._nl_pos[branch]

    def mu_plus(self, branch: int, j: int) -> int:
        return self.off_mu_plus + self._nl_pos[branch] * self.m + j

    def mu_minus(self, branch: int, j: int) -> int:
        return self.off_mu_minus + self._nl_pos[branch] * self.m + j

    def extract(self, xvec: np.ndarray, traj: TrajectoryTree) -> TrajectoryTree:
        """Copy the solution's states and inputs into a fresh trajectory tree."""
        out = traj.copy()
        flat = xvec[: self.n_states].reshape(self.n_slots, self.n_x)
        out.set_flat_states(flat)
        for i, L in enumerate(self.lengths):
            out.u[i][:] = xvec[self.input(i, 0).start: self.input(i, L - 1).stop].reshape(L, self.n_u)
        return out


def make_layout(bundle: LinearizationBundle, cvar: bool) -> VarLayout:
    tr, traj = bundle.tree, bundle.traj
    return VarLayout(n_slots=traj.n_slots, n_x=traj.n_x, n_u=traj.n_u,
                     lengths=[b.length for b in tr.branches], n_con=bundle.n_con,
                     nonleaf=[b.id for b in tr.branches if not b.is_leaf],
                     m=tr.m, cvar=cvar)


# ---------------------------------------------------------------------------
# Shared assembly pieces
# ---------------------------------------------------------------------------

class _Triplets:
    """COO accumulator for one sparse matrix."""

    def __init__(self):
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.n_rows = 0

    def add(self, r, c, v) -> None:
        r, c, v = np.broadcast_arrays(r, c, v)
        self.rows.extend(np.asarray(r, dtype=int).ravel())
        self.cols.extend(np.asarray(c, dtype=int).ravel())
        self.vals.extend(np.asarray(v, dtype=float).ravel())

    def add_block(self, r0: int, cols: slice, M: np.ndarray) -> None:
        M = np.atleast_2d(M)
        rr, cc = np.meshgrid(np.arange(M.shape[0]) + r0,
                             np.arange(cols.start, cols.stop), indexing="ij")
        self.add(rr, cc, M)

    def new_rows(self, count: int) -> int:
        r0 = self.n_rows
        self.n_rows += count
        return r0

    def matrix(self, n_cols: int, n_rows: int | None = None):
        return sp.csr_matrix((self.vals, (self.rows, self.cols)),
                             shape=(self.n_rows if n_rows is None else n_rows, n_cols))


def _equality_rows(bundle: LinearizationBundle, lay: VarLayout):
    """Initial state, in-branch dynamics, and the parent->child link steps."""
    tr, traj = bundle.tree, bundle.traj
    n_x = lay.n_x
    T = _Triplets()
    b_rhs: list[np.ndarray] = []
    r0 = T.new_rows(n_x)
    T.add_block(r0, lay.state(traj.slots[0][0]), np.eye(n_x))
    b_rhs.append(traj.x[0][0].copy())
    for br in tr.branches:
        s = traj.slots[br.id]
        for k in range(br.length - 1):
            r0 = T.new_rows(n_x)
            T.add_block(r0, lay.state(s[k + 1]), np.eye(n_x))
            T.add_block(r0, lay.state(s[k]), -bundle.A[br.id][k])
            T.add_block(r0, lay.input(br.id, k), -bundle.B[br.id][k])
            b_rhs.append(bundle.C[br.id][k])
        if not br.is_leaf:
            Al, Bl, Cl = bundle.link[br.id]
            child_slot = traj.slots[br.children[0]][0]
            r0 = T.new_rows(n_x)
            T.add_block(r0, lay.state(child_slot), np.eye(n_x))
            T.add_block(r0, lay.state(s[-1]), -Al)
            T.add_block(r0, lay.input(br.id, br.length - 1), -Bl)
            b_rhs.append(Cl)
    return T, list(b_rhs)


def _inequality_rows(bundle: LinearizationBundle, lay: VarLayout,
                     u_min: np.ndarray, u_max: np.ndarray):
    """Input box, slack nonnegativity, and softened constraint rows."""
    tr, traj = bundle.tree, bundle.traj
    safety = bundle.predictor.safety
    hi = _heading_index(bundle.model)
    G = _Triplets()
    h: list[float] = []
    for br in tr.branches:
        for k in range(br.length):
            iu = lay.input(br.id, k)
            r0 = G.new_rows(2 * lay.n_u)
            G.add_block(r0, iu, np.eye(lay.n_u))
            G.add_block(r0 + lay.n_u, iu, -np.eye(lay.n_u))
            h.extend(u_max)
            h.extend(-u_min)
    r0 = G.new_rows(lay.off_t - lay.off_s)
    G.add(np.arange(r0, G.n_rows), np.arange(lay.off_s, lay.off_t), -1.0)
    h.extend([0.0] * (lay.off_t - lay.off_s))
    for br in tr.branches:
        s = traj.slots[br.id]
        xhat = traj.x[br.id]
        for k in range(br.length):
            sl = lay.slack(br.id, k)
            xs = lay.state(s[k])
            r0 = G.new_rows(lay.n_con[br.id])
            G.add([r0, r0 + 1, r0 + 2, r0 + 3],
                  [xs.start + 1, xs.start + 1, xs.start + hi, xs.start + hi],
                  [-1.0, 1.0, -1.0, 1.0])
            G.add(np.arange(r0, r0 + lay.n_con[br.id]), np.arange(sl.start, sl.stop), -1.0)
            h.extend([-safety.y_min, safety.y_max, -safety.psi_min, safety.psi_max])
            for c in range(lay.n_con[br.id] - _N_BOUND_ROWS):
                g = bundle.col_grad[br.id][c, k]
                val = bundle.col_val[br.id][c, k]
                G.add([r0 + _N_BOUND_ROWS + c] * 2, [xs.start, xs.start + 1], -g)
                h.append(float(val - g @ xhat[k, :2] - 1.0))
    return G, h


def _branch_costs_at_reference(bundle: LinearizationBundle, cost: CostSpec) -> np.ndarray:
    """Extended cost of every branch evaluated at the linearization point."""
    return np.array([
        extended_cost(bundle.traj.x[b.id], bundle.z_sets[b.id], bundle.traj.u[b.id],
                      cost, bundle.predictor.safety, bundle.model, bundle.geometry)
        for b in bundle.tree.branches])


def _sqrt_factor(M: np.ndarray) -> np.ndarray:
    """Symmetric square root with near-zero rows dropped (for cone blocks)."""
    w, V = np.linalg.eigh(M)
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    keep = np.abs(root).max(axis=1) > 1e-12 * max(1.0, np.abs(root).max())
    return root[keep]


def _proximal_terms(lay: VarLayout, flat_ref: np.ndarray, omega: float,
                    P: _Triplets, q: np.ndarray) -> float:
    if omega == 0.0:
        return 0.0
    idx = np.arange(lay.n_states)
    P.add(idx, idx, 2.0 * omega)
    xf = flat_ref.ravel()
    q[: lay.n_states] += -2.0 * omega * xf
    return omega * float(xf @ xf)


# ---------------------------------------------------------------------------
# Risk-neutral QP
# ---------------------------------------------------------------------------

def assemble_risk_neutral(bundle: LinearizationBundle, cost: CostSpec,
                          u_min: np.ndarray, u_max: np.ndarray, *,
                          include_weight_gradient: bool = True,
                          weight_floor: float = 1e-6) -> ConicProgram:
    """Expectation-objective QP over the trajectory tree.

    Objective: sum_i [grad w_i(x-hat) . J-bar_i(x-hat)] x + w_i(x-hat) J-bar_i(x, u)
    plus the proximal term; dynamics and softened constraints as rows.
    """
    lay = make_layout(bundle, cvar=False)
    tr, traj = bundle.tree, bundle.traj
    S = cost.output_map(lay.n_x)
    SQS = 2.0 * (S.T @ cost.Q @ S)
    Sq_ref = 2.0 * (S.T @ (cost.Q @ cost.x_ref))
    ref_const = float(cost.x_ref @ cost.Q @ cost.x_ref)
    w = bundle.weights.weights
    w_eff = np.maximum(w, weight_floor)

    P = _Triplets()
    q = np.zeros(lay.n)
    r = 0.0
    for br in tr.branches:
        wi = w_eff[br.id]
        for k in range(br.length):
            xs = lay.state(traj.slots[br.id][k])
            P.add_block(xs.start, xs, wi * SQS)
            q[xs] += -wi * Sq_ref
            r += wi * ref_const
            iu = lay.input(br.id, k)
            P.add_block(iu.start, iu, 2.0 * wi * cost.R)
        q[lay.slack_block(br.id)] = cost.beta * wi
    if include_weight_gradient:
        Jhat = _branch_costs_at_reference(bundle, cost)
        lin = np.einsum("i,isp->sp", Jhat, bundle.weights.grad)  # (n_slots, 2)
        pos = np.arange(lay.n_slots) * lay.n_x
        q[pos] += lin[:, 0]
        q[pos + 1] += lin[:, 1]
    r += _proximal_terms(lay, traj.flat_states(), cost.omega, P, q)

    Aeq, b_rhs = _equality_rows(bundle, lay)
    G, h = _inequality_rows(bundle, lay, u_min, u_max)
    return ConicProgram(n=lay.n, P=_sym(P.matrix(lay.n, lay.n)), q=q,
                        A=Aeq.matrix(lay.n), b=np.concatenate(b_rhs),
                        G=G.matrix(lay.n), h=np.asarray(h), r=r)


def _sym(M):
    return (M + M.T) * 0.5


# ---------------------------------------------------------------------------
# CVaR SOCP
# ---------------------------------------------------------------------------

def assemble_cvar(bundle: LinearizationBundle, cost: CostSpec,
                  u_min: np.ndarray, u_max: np.ndarray, alpha: float, *,
                  p_correction: dict[int, np.ndarray] | None = None) -> ConicProgram:
    """Nested-CVaR SOCP: epigraphs t_j >= J-bar_j as rotated cones plus the
    dual recursion rows; probabilities are frozen at the linearization point.

    p_correction optionally maps non-leaf branch ids to multiplier estimates
    mu- from the previous iterate; the risk equalities then carry a first-order
    probability sensitivity term in the planned states.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    lay = make_layout(bundle, cvar=True)
    tr, traj = bundle.tree, bundle.traj
    S = cost.output_map(lay.n_x)
    Qroot = _sqrt_factor(cost.Q)
    QrootS = Qroot @ S
    Rroot = _sqrt_factor(cost.R)

    P = _Triplets()
    q = np.zeros(lay.n)
    q[lay.t(0)] = 1.0
    if tr.branches[0].children:
        q[lay.gamma(0)] = 1.0
    r = _proximal_terms(lay, traj.flat_states(), cost.omega, P, q)

    Aeq, b_rhs = _equality_rows(bundle, lay)
    for br in tr.branches:
        if br.is_leaf:
            continue
        row = Aeq.new_rows(1)
        Aeq.add(row, lay.gamma(br.id), 1.0)
        Aeq.add(row, lay.sigma(br.id), 1.0)
        rhs = 0.0
        for j, c in enumerate(br.children):
            Aeq.add(row, lay.mu_minus(br.id, j), -bundle.weights.cond[c] / alpha)
        if p_correction is not None and br.id in p_correction:
            mu_hat = np.clip(np.asarray(p_correction[br.id], dtype=float), 0.0, None)
            T = bundle.predictor.horizon
            probs = prediction.branch_probabilities(
                [traj.x[c][:T] for c in br.children],
                [tr.branches[c].z[:T] for c in br.children], bundle.predictor)
            sens = np.einsum("j,jstp->stp", mu_hat, probs.jac) / alpha  # (m, T, 2)
            for j, c in enumerate(br.children):
                sl = traj.slots[c][:T]
                cols = sl * lay.n_x
                Aeq.add(row, cols, -sens[j, :, 0])
                Aeq.add(row, cols + 1, -sens[j, :, 1])
                rhs -= float(sens[j, :, 0] @ traj.x[c][:T, 0] + sens[j, :, 1] @ traj.x[c][:T, 1])
        b_rhs.append(np.array([rhs]))

    G, h = _inequality_rows(bundle, lay, u_min, u_max)
    n_mu = lay.n - lay.off_mu_plus
    if n_mu:
        r0 = G.new_rows(n_mu)
        G.add(np.arange(r0, G.n_rows), np.arange(lay.off_mu_plus, lay.n), -1.0)
        h.extend([0.0] * n_mu)
    for br in tr.branches:
        if br.is_leaf:
            continue
        for j, c in enumerate(br.children):
            row = G.new_rows(1)
            G.add(row, lay.t(c), 1.0)
            G.add(row, lay.sigma(br.id), 1.0)
            G.add(row, lay.mu_plus(br.id, j), 1.0)
            G.add(row, lay.mu_minus(br.id, j), -1.0)
            if not tr.branches[c].is_leaf:
                G.add(row, lay.gamma(c), 1.0)
            h.append(0.0)

    cones = [_epigraph_cone(lay, cost, br, traj, QrootS, Qroot @ cost.x_ref, Rroot)
             for br in tr.branches]
    return ConicProgram(n=lay.n, P=_sym(P.matrix(lay.n, lay.n)), q=q,
                        A=Aeq.matrix(lay.n), b=np.concatenate(b_rhs),
                        G=G.matrix(lay.n), h=np.asarray(h), cones=cones, r=r)


def _epigraph_cone(lay: VarLayout, cost: CostSpec, br, traj: TrajectoryTree,
                   QrootS: np.ndarray, q_ref: np.ndarray,
                   Rroot: np.ndarray) -> SecondOrderCone:
    """Rotated-cone encoding of t >= tracking-quadratic + beta * sum(slacks).

    With u = t - beta 1's, v = 1/2, the cone (u+v, u-v, sqrt(2) y) requires
    u >= ||y||^2, and y stacks the square-root-weighted tracking and input
    errors of every node the branch owns.
    """
    nq, nr = QrootS.shape[0], Rroot.shape[0]
    dim = 2 + br.length * (nq + nr)
    F = _Triplets()
    F.n_rows = dim
    g = np.zeros(dim)
    sb = lay.slack_block(br.id)
    for head in (0, 1):
        F.add(head, lay.t(br.id), 1.0)
        F.add([head] * (sb.stop - sb.start), np.arange(sb.start, sb.stop), -cost.beta)
    g[0], g[1] = 0.5, -0.5
    root2 = np.sqrt(2.0)
    row = 2
    for k in range(br.length):
        xs = lay.state(traj.slots[br.id][k])
        F.add_block(row, xs, root2 * QrootS)
        g[row: row + nq] = -root2 * q_ref
        row += nq
        iu = lay.input(br.id, k)
        F.add_block(row, iu, root2 * Rroot)
        row += nr
    return SecondOrderCone(F=F.matrix(lay.n), g=g)


# ---------------------------------------------------------------------------
# SQP loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IterationDiagnostics:
    status: str
    objective: float       # subproblem objective value
    true_objective: float  # nonlinear risk objective after the step
    step_norm: float
    solve_time: float
    iterations: int        # interior-point iterations spent
    leaf_weight_sum: float = 1.0  # total probability mass over the leaves


@dataclass
class PlanResult:
    traj: TrajectoryTree
    tree: ScenarioTree
    weights: np.ndarray
    u0: np.ndarray
    objective: float
    status: str                      # "optimal" or "degraded"
    diagnostics: list[IterationDiagnostics] = field(default_factory=list)
    mu_minus: dict[int, np.ndarray] = field(default_factory=dict)


def _cold_start(tree: ScenarioTree, x_t: np.ndarray, model: ModelKind,
                dt: float) -> TrajectoryTree:
    """Zero-input rollout through the tree as the initial linearization point."""
    traj = TrajectoryTree.zeros(tree, model)
    u0 = np.zeros(model.n_u)
    for br in tree.branches:
        if br.parent is None:
            traj.x[br.id][0] = x_t
        else:
            traj.x[br.id][0] = dynamics.step(traj.x[br.parent][-1], u0, dt, model)
        for k in range(br.length - 1):
            traj.x[br.id][k + 1] = dynamics.step(traj.x[br.id][k], u0, dt, model)
    return traj


def _shift_start(previous: PlanResult, tree: ScenarioTree, model: ModelKind,
                 dt: float) -> TrajectoryTree:
    """Receding-horizon warm start: every branch advances one node; non-leaf
    branches take the shared child node as their new endpoint, leaves roll the
    held input one step. Shared first nodes are re-merged by the conditional
    probabilities of the previous plan."""
    prev = previous.traj
    traj = TrajectoryTree.zeros(tree, model)
    for br in tree.branches:
        traj.x[br.id][:-1] = prev.x[br.id][1:]
        traj.u[br.id][:-1] = prev.u[br.id][1:]
        if br.is_leaf:
            traj.u[br.id][-1] = prev.u[br.id][-1]
            traj.x[br.id][-1] = dynamics.step(prev.x[br.id][-1], prev.u[br.id][-1], dt, model)
        else:
            kids = br.children
            cond = np.array([previous.tree.branches[c].cond_prob for c in kids])
            cond = cond / cond.sum() if cond.sum() > 0 else np.full(len(kids), 1.0 / len(kids))
            traj.x[br.id][-1] = prev.x[kids[0]][0]
            traj.u[br.id][-1] = sum(p * prev.u[c][0] for p, c in zip(cond, kids))
    for br in tree.branches:
        if br.is_leaf:
            continue
        kids = br.children
        cond = np.array([previous.tree.branches[c].cond_prob for c in kids])
        cond = cond / cond.sum() if cond.sum() > 0 else np.full(len(kids), 1.0 / len(kids))
        merged = sum(p * prev.x[c][1] for p, c in zip(cond, kids))
        for c in kids:
            traj.x[c][0] = merged
    return traj


def _compatible(previous: PlanResult | None, tree: ScenarioTree) -> bool:
    if previous is None:
        return False
    prev = previous.traj
    return (len(prev.x) == tree.n_branches
            and all(prev.x[b.id].shape[0] == b.length for b in tree.branches))


def true_objective(tree: ScenarioTree, traj: TrajectoryTree,
                   z_sets: list[list[np.ndarray]], config: PlannerConfig,
                   weights: np.ndarray) -> float:
    """Nonlinear risk objective of a candidate plan (hinges, not slacks)."""
    costs = np.array([
        extended_cost(traj.x[b.id], z_sets[b.id], traj.u[b.id], config.cost,
                      config.safety, config.model, config.predictor.geometry)
        for b in tree.branches])
    if config.risk.kind == "expectation":
        return float(weights @ costs)
    total, _ = risk_mod.nested_risk(tree, costs, config.risk.alpha)
    return total


def _sqp(tree: ScenarioTree, traj: TrajectoryTree, config: PlannerConfig,
         z_sets: list[list[np.ndarray]] | None, *,
         branch_weights: bool) -> PlanResult:
    """Shared SQP driver for branch and single-trajectory robust planning."""
    x_t = traj.x[0][0].copy()
    status = "optimal"
    diags: list[IterationDiagnostics] = []
    mu_prev: dict[int, np.ndarray] = {}
    cvar = config.risk.kind == "cvar"
    for _ in range(config.sqp_iterations):
        if branch_weights:
            weights = tree_mod.compute_weights(tree, traj, config.predictor)
        else:
            weights = WeightInfo(weights=np.ones(tree.n_branches),
                                 cond=np.ones(tree.n_branches),
                                 grad=np.zeros((tree.n_branches, traj.n_slots, 2)))
        bundle = linearize_tree(tree, traj, config.predictor, config.model,
                                config.dt, weights, z_sets)
        if cvar:
            prog = assemble_cvar(bundle, config.cost, config.u_min, config.u_max,
                                 config.risk.alpha,
                                 p_correction=mu_prev if config.cvar_p_correction else None)
        else:
            prog = assemble_risk_neutral(bundle, config.cost, config.u_min,
                                         config.u_max,
                                         include_weight_gradient=branch_weights)
        sol = solve(prog, config.solver)
        if sol.x is None:
            status = "degraded"
            break
        if sol.status != "optimal":
            status = "degraded"
        lay = make_layout(bundle, cvar=cvar)
        new_traj = lay.extract(sol.x, traj)
        new_traj.x[0][0] = x_t
        if cvar:
            mu_prev = {b.id: np.array([sol.x[lay.mu_minus(b.id, j)]
                                       for j in range(len(b.children))])
                       for b in tree.branches if not b.is_leaf}
        step = float(np.sqrt(
            np.linalg.norm(new_traj.flat_states() - traj.flat_states()) ** 2
            + sum(np.linalg.norm(nu - ou) ** 2 for nu, ou in zip(new_traj.u, traj.u))))
        traj = new_traj
        diags.append(IterationDiagnostics(
            status=sol.status, objective=sol.objective,
            true_objective=true_objective(tree, traj, bundle.z_sets, config,
                                          weights.weights),
            step_norm=step, solve_time=sol.solve_time, iterations=sol.iterations,
            leaf_weight_sum=float(sum(weights.weights[b.id]
                                      for b in tree.branches if b.is_leaf))))
        if step < config.step_tolerance:
            break
    if branch_weights:
        final = tree_mod.compute_weights(tree, traj, config.predictor)
        w = final.weights
    else:
        w = np.ones(tree.n_branches)
    zs = z_sets if z_sets is not None else [[b.z] for b in tree.branches]
    return PlanResult(traj=traj, tree=tree, weights=w, u0=traj.u[0][0].copy(),
                      objective=true_objective(tree, traj, zs, config, w),
                      status=status, diagnostics=diags, mu_minus=mu_prev)


def plan(x_t: np.ndarray, z_t: np.ndarray, previous: PlanResult | None,
         config: PlannerConfig, current_policy: int = 0) -> PlanResult:
    """One branch-MPC planning step; only u0 of the result is applied."""
    x_t = np.asarray(x_t, dtype=float).ravel()
    if x_t.shape != (config.model.n_x,):
        raise ValueError("x_t does not match the model state dimension")
    tree = tree_mod.build_topology(config.m, config.M, config.depth, config.dt)
    tree_mod.propagate_scenarios(tree, np.asarray(z_t, dtype=float), config.predictor.policies,
                                 config.dt, current_policy=current_policy)
    if _compatible(previous, tree):
        traj = _shift_start(previous, tree, config.model, config.dt)
    else:
        traj = _cold_start(tree, x_t, config.model, config.dt)
    traj.x[0][0] = x_t
    return _sqp(tree, traj, config, None, branch_weights=True)


def robust_plan(x_t: np.ndarray, z_t: np.ndarray, previous: PlanResult | None,
                config: PlannerConfig, current_policy: int = 0) -> PlanResult:
    """Single-trajectory baseline: one plan constrained against every policy
    rollout of the uncontrolled agent simultaneously."""
    x_t = np.asarray(x_t, dtype=float).ravel()
    if x_t.shape != (config.model.n_x,):
        raise ValueError("x_t does not match the model state dimension")
    N = (config.depth + 1) * config.M
    tree = tree_mod.build_topology(1, N, 0, config.dt)
    z_t = np.asarray(z_t, dtype=float)
    pol = config.predictor.policies
    from . import policies as policies_mod
    rollouts = [policies_mod.rollout(pol, pid, z_t, N - 1, config.dt)
                for pid in range(len(pol))]
    tree.branches[0].z = rollouts[current_policy]
    if _compatible(previous, tree):
        traj = _shift_start(previous, tree, config.model, config.dt)
    else:
        traj = _cold_start(tree, x_t, config.model, config.dt)
    traj.x[0][0] = x_t
    return _sqp(tree, traj, config, [rollouts], branch_weights=False)
