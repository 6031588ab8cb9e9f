"""Closed-loop simulation of the branch planner against a policy-driven agent.

Each control step plans a trajectory tree from the current states, applies the
root input to the ego agent, and advances the uncontrolled agent under its
active policy. The active policy is re-selected periodically by one of three
rules: `sample` draws from the planner's own predictive distribution at the
root branching node, `argmax` picks its mode, and `teleop` takes whatever
policy a human queued. Runs are reproducible: all randomness flows from the
scenario seed.

Logs are line-delimited JSON, one record per control step plus a terminal
record carrying only the final states; `metrics` reduces a log to the summary
used by the scenario studies (task completion, clearance, timing, violation).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from queue import Empty, Queue

import numpy as np

from . import dynamics, ocp, prediction
from . import policies as policies_mod
from . import risk as risk_mod
from .models import ModelKind, QUADRUPED, VEHICLE
from .policies import Policy, PolicySet

SCENARIO_KINDS = ("overtake", "merge", "quadruped-waypoint")
ADVERSARY_RULES = ("sample", "argmax", "teleop")


@dataclass(frozen=True)
class RampSpec:
    """Straight on-ramp merging into the main lane (y = 0) at x_merge.

    The ramp centerline is y(x) = slope * (x - x_merge) for x < x_merge and 0
    after; the tracking cost re-linearizes this piecewise map every step.
    """
    x_merge: float
    y_start: float      # ramp lateral offset at x = 0; negative = below the lane
    v_ref: float

    @property
    def slope(self) -> float:
        return -self.y_start / self.x_merge

    def reference(self, x_now: float) -> tuple[np.ndarray, np.ndarray]:
        """Affine output map (S, x_ref) for the current road segment."""
        if x_now < self.x_merge:
            a = self.slope
            S = np.array([[-a, 1.0, 0.0, 0.0],
                          [0.0, 0.0, 1.0, 0.0],
                          [0.0, 0.0, 0.0, 1.0]])
            ref = np.array([-a * self.x_merge, self.v_ref, np.arctan(a)])
        else:
            S = np.array([[0.0, 1.0, 0.0, 0.0],
                          [0.0, 0.0, 1.0, 0.0],
                          [0.0, 0.0, 0.0, 1.0]])
            ref = np.array([0.0, self.v_ref, 0.0])
        return S, ref


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str
    planner: ocp.PlannerConfig
    x0: np.ndarray                      # initial ego state
    z0: np.ndarray                      # initial uncontrolled-agent state
    duration: float                     # seconds of closed loop
    seed: int = 0
    adversary_rule: str = "sample"
    update_period: int = 4              # control steps between re-selections
    initial_policy: int = 0
    lane_width: float = 3.7
    n_lanes: int = 2
    ramp: RampSpec | None = None
    waypoints: np.ndarray | None = None  # (n, 2) targets for the waypoint task
    waypoint_radius: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).ravel())
        object.__setattr__(self, "z0", np.asarray(self.z0, dtype=float).ravel())
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"kind must be one of {SCENARIO_KINDS}, got {self.kind!r}")
        if self.adversary_rule not in ADVERSARY_RULES:
            raise ValueError(f"adversary_rule must be one of {ADVERSARY_RULES}")
        if self.duration < 0.0:
            raise ValueError("duration must be nonnegative")
        if self.update_period < 1:
            raise ValueError("update_period must be at least 1")
        if not 0 <= self.initial_policy < self.planner.m:
            raise ValueError("initial_policy out of range")
        if self.x0.shape != (self.planner.model.n_x,):
            raise ValueError("x0 does not match the model state dimension")
        if self.z0.shape != (self.planner.model.n_x,):
            raise ValueError("z0 does not match the model state dimension")
        if self.kind == "merge" and self.ramp is None:
            raise ValueError("merge scenario requires a ramp")
        if self.kind == "quadruped-waypoint":
            if self.waypoints is None:
                raise ValueError("waypoint scenario requires waypoints")
            object.__setattr__(self, "waypoints",
                               np.asarray(self.waypoints, dtype=float).reshape(-1, 2))

    @property
    def policies(self) -> PolicySet:
        return self.planner.predictor.policies

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.planner.dt))


@dataclass
class SimRecord:
    t: float
    x: np.ndarray
    z: np.ndarray
    active_policy: int
    u: np.ndarray | None = None          # applied ego input (None: terminal)
    status: str | None = None
    objective: float | None = None
    plan_time: float | None = None       # wall-clock seconds for the plan call
    weights: np.ndarray | None = None
    tree: dict | None = None             # topology + planned states snapshot
    diagnostics: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "t": round(self.t, 9),
            "ego": [float(v) for v in self.x],
            "adversary": [float(v) for v in self.z],
            "active_policy": int(self.active_policy),
            "u": None if self.u is None else [float(v) for v in self.u],
            "status": self.status,
            "objective": self.objective,
            "plan_time": self.plan_time,
            "weights": None if self.weights is None else [float(w) for w in self.weights],
            "tree": self.tree,
            "diagnostics": self.diagnostics,
        }


@dataclass
class SimLog:
    scenario: ScenarioConfig
    records: list[SimRecord]

    def to_jsonl(self, path, include_trees: bool = True) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                d = rec.to_dict()
                if not include_trees:
                    d.pop("tree")
                fh.write(json.dumps(d) + "\n")

    def states(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (ego, adversary) state histories, one row per record."""
        return (np.array([r.x for r in self.records]),
                np.array([r.z for r in self.records]))


def _tree_snapshot(result: ocp.PlanResult) -> dict:
    return {"branches": [
        {"id": b.id, "parent": b.parent, "policy_id": b.policy_id,
         "weight": float(result.weights[b.id]),
         "states": [[float(v) for v in row] for row in result.traj.x[b.id]]}
        for b in result.tree.branches]}


def _planner_for_step(config: ScenarioConfig, planner: ocp.PlannerConfig,
                      x: np.ndarray, waypoint_idx: int) -> tuple[ocp.PlannerConfig, int]:
    """Re-linearize the tracking reference where the scenario calls for it."""
    if config.kind == "merge":
        S, ref = config.ramp.reference(float(x[0]))
        cost = replace(planner.cost, S=S, x_ref=ref)
        return replace(planner, cost=cost), waypoint_idx
    if config.kind == "quadruped-waypoint":
        wps = config.waypoints
        if (waypoint_idx + 1 < len(wps)
                and np.linalg.norm(x[:2] - wps[waypoint_idx]) < config.waypoint_radius):
            waypoint_idx += 1
        ref = np.array([wps[waypoint_idx][0], wps[waypoint_idx][1], 0.0])
        return replace(planner, cost=replace(planner.cost, x_ref=ref)), waypoint_idx
    return planner, waypoint_idx


def _root_distribution(result: ocp.PlanResult, config: ScenarioConfig,
                       planner: ocp.PlannerConfig) -> np.ndarray:
    """The planner's own predictive distribution at the root branching node."""
    root = result.tree.branches[0]
    if root.children:
        p = np.array([result.tree.branches[c].cond_prob for c in root.children])
        total = p.sum()
        if total > 0.0:
            return p / total
    # single-trajectory plans carry no branching: evaluate the model directly
    pred = planner.predictor
    T = pred.horizon
    seg = result.traj.x[0][:T]
    z_now = result.tree.branches[0].z[0]
    rolls = [policies_mod.rollout(config.policies, j, z_now, T, planner.dt)[1:T + 1]
             for j in range(len(config.policies))]
    probs = prediction.branch_probabilities([seg] * len(rolls), rolls, pred)
    return probs.p


def _drain_teleop(queue: Queue, active: int, planner: ocp.PlannerConfig,
                  config: ScenarioConfig) -> tuple[int, ocp.PlannerConfig]:
    """Apply queued operator commands in arrival order."""
    while True:
        try:
            kind, value = queue.get_nowait()
        except Empty:
            return active, planner
        if kind == "policy" and config.adversary_rule == "teleop":
            pid = int(value)
            if 0 <= pid < len(config.policies):
                active = pid
        elif kind == "alpha":
            alpha = float(value)
            if 0.0 < alpha <= 1.0:
                planner = replace(planner, risk=risk_mod.RiskSpec("cvar", alpha))


def run_closed_loop(config: ScenarioConfig, *, teleop: Queue | None = None,
                    on_step=None, should_stop=None) -> SimLog:
    """Alternate planning and environment steps for the configured duration.

    `teleop` carries ("policy", id) and ("alpha", value) tuples from an
    operator; commands are consumed at the start of the next control step.
    `on_step` is called with every appended record; `should_stop` is polled
    each step so a service can end a session early.
    """
    rng = np.random.default_rng(config.seed)
    planner = config.planner
    model = planner.model
    dt = planner.dt
    x = config.x0.copy()
    z = config.z0.copy()
    active = config.initial_policy
    previous: ocp.PlanResult | None = None
    waypoint_idx = 0
    records: list[SimRecord] = []
    t = 0.0
    for k in range(config.n_steps):
        if should_stop is not None and should_stop():
            break
        if teleop is not None:
            active, planner = _drain_teleop(teleop, active, planner, config)
        step_cfg, waypoint_idx = _planner_for_step(config, planner, x, waypoint_idx)
        plan_fn = ocp.robust_plan if step_cfg.mode == "robust" else ocp.plan
        started = time.perf_counter()
        result = plan_fn(x, z, previous, step_cfg, current_policy=active)
        elapsed = time.perf_counter() - started
        rec = SimRecord(
            t=t, x=x.copy(), z=z.copy(), active_policy=active, u=result.u0.copy(),
            status=result.status, objective=float(result.objective),
            plan_time=elapsed, weights=result.weights.copy(),
            tree=_tree_snapshot(result),
            diagnostics=[asdict(d) for d in result.diagnostics])
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        u_adv = policies_mod.policy_input(config.policies, active, z, dt)
        x = dynamics.step(x, result.u0, dt, model)
        z = dynamics.step(z, u_adv, dt, model)
        t = (k + 1) * dt
        if config.adversary_rule != "teleop" and (k + 1) % config.update_period == 0:
            p = _root_distribution(result, config, step_cfg)
            if config.adversary_rule == "sample":
                active = int(rng.choice(len(p), p=p))
            else:
                active = int(np.argmax(p))
        previous = result
    final = SimRecord(t=t, x=x.copy(), z=z.copy(), active_policy=active)
    records.append(final)
    if on_step is not None:
        on_step(final)
    return SimLog(scenario=config, records=records)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsSummary:
    scenario: str
    seed: int
    alpha: float
    mode: str
    steps: int
    duration: float
    overtake_completed: bool | None
    merge_yielded: bool | None
    min_normalized_distance: float
    mean_solve_time: float
    max_solve_time: float
    violation_integral: float

    def to_dict(self) -> dict:
        return asdict(self)


def _normalized_distance(x: np.ndarray, z: np.ndarray, config: ScenarioConfig) -> float:
    spec = config.planner.predictor.safety
    if config.planner.predictor.geometry == "circle":
        return prediction.circular_collision_value(x, z, spec)
    return prediction.collision_value(x, z, spec)


def _lane_index(y: float, lane_width: float) -> int:
    return int(round(y / lane_width))


def metrics(log: SimLog) -> MetricsSummary:
    """Reduce a closed-loop log to the scenario-study summary."""
    if not log.records:
        raise ValueError("metrics need a non-empty log")
    config = log.scenario
    planner = config.planner
    dt = planner.dt
    ego, adv = log.states()
    distances = [_normalized_distance(r.x, r.z, config) for r in log.records]

    overtake = None
    if planner.model.name == VEHICLE.name:
        clearance = planner.predictor.safety.dx_max
        lane0 = _lane_index(float(adv[0, 1]), config.lane_width)
        overtake = bool(any(
            xe[0] - za[0] >= clearance
            and _lane_index(float(xe[1]), config.lane_width) == lane0
            for xe, za in zip(ego, adv)))

    yielded = None
    if config.ramp is not None:
        xm = config.ramp.x_merge
        ego_cross = next((i for i, xe in enumerate(ego) if xe[0] >= xm), None)
        adv_cross = next((i for i, za in enumerate(adv) if za[0] >= xm), None)
        if adv_cross is None:
            yielded = False
        else:
            yielded = ego_cross is None or adv_cross < ego_cross

    violation = 0.0
    for rec in log.records[:-1]:
        rows = ocp.constraint_values(rec.x[None, :], [rec.z[None, :]],
                                     planner.predictor.safety, planner.model,
                                     planner.predictor.geometry)
        violation += dt * float(np.clip(rows, 0.0, None).sum())

    times = [r.plan_time for r in log.records if r.plan_time is not None]
    return MetricsSummary(
        scenario=config.kind, seed=config.seed,
        alpha=planner.risk.effective_alpha, mode=planner.mode,
        steps=len(log.records) - 1, duration=(len(log.records) - 1) * dt,
        overtake_completed=overtake, merge_yielded=yielded,
        min_normalized_distance=float(min(distances)),
        mean_solve_time=float(np.mean(times)) if times else 0.0,
        max_solve_time=float(np.max(times)) if times else 0.0,
        violation_integral=violation)


def write_metrics_csv(rows: list[MetricsSummary], path) -> None:
    import csv

    dicts = [r.to_dict() for r in rows]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(dicts[0].keys()))
        writer.writeheader()
        writer.writerows(dicts)


# ---------------------------------------------------------------------------
# Scenario builders (repo defaults; geometry numbers are ours, not published)
# ---------------------------------------------------------------------------

def _vehicle_safety(y_min: float = -1.85, tau: float = 0.1) -> prediction.SafetySpec:
    return prediction.SafetySpec(dx_max=10.0, dy_max=2.5, y_min=y_min, y_max=5.55,
                                 psi_min=-0.6, psi_max=0.6, kappa=10.0, tau=tau)


def _vehicle_policies(v_adv: float, lane_width: float, *, decel: float = 3.0,
                      v_floor: float = 2.0) -> PolicySet:
    return PolicySet((
        Policy(0, "maintain-speed", {"v_nominal": v_adv, "y_target": 0.0}),
        Policy(1, "slow-down", {"decel": decel, "v_floor": v_floor,
                                "y_target": 0.0}),
        Policy(2, "lane-change", {"v_nominal": v_adv, "y_target": lane_width}),
    ), VEHICLE, u_min=[-6.0, -0.6], u_max=[4.0, 0.6])


def overtake_scenario(*, alpha: float = 0.9, seed: int = 0, mode: str = "branch",
                      duration: float = 20.0, adversary_rule: str = "argmax",
                      sqp_iterations: int = 2) -> ScenarioConfig:
    """Two-lane highway: pass a slower vehicle that may swerve into the gap."""
    lane_width = 3.7
    pols = _vehicle_policies(v_adv=8.0, lane_width=lane_width, decel=1.0,
                             v_floor=6.0)
    safety = _vehicle_safety(y_min=-0.9, tau=0.05)
    predictor = prediction.PredictiveModel(pols, safety, eta=0.2, horizon=5,
                                           hard_saturation=True, gain=6.0)
    risk_spec = (risk_mod.RiskSpec("cvar", alpha) if mode == "branch"
                 else risk_mod.RiskSpec("expectation"))
    planner = ocp.PlannerConfig(
        model=VEHICLE, m=3, M=5, depth=2, dt=0.25,
        cost=ocp.CostSpec(Q=np.diag([0.0, 0.1, 0.8, 0.05]), R=np.diag([0.1, 0.4]),
                          x_ref=np.array([0.0, 0.0, 12.0, 0.0]), beta=100.0),
        predictor=predictor, u_min=[-6.0, -0.5], u_max=[4.0, 0.5],
        risk=risk_spec, sqp_iterations=sqp_iterations, mode=mode,
        cvar_p_correction=True)
    return ScenarioConfig(
        kind="overtake", planner=planner,
        x0=np.array([0.0, 0.0, 11.0, 0.0]), z0=np.array([30.0, 0.0, 8.0, 0.0]),
        duration=duration, seed=seed, adversary_rule=adversary_rule,
        update_period=10 ** 6,  # the lead vehicle stays committed to its policy
        initial_policy=0, lane_width=lane_width)


def merge_scenario(*, alpha: float = 0.9, seed: int = 0, mode: str = "branch",
                   duration: float = 8.0, adversary_rule: str = "argmax",
                   sqp_iterations: int = 2) -> ScenarioConfig:
    """On-ramp merge: the main-lane vehicle may keep its speed or yield."""
    ramp = RampSpec(x_merge=45.0, y_start=-6.0, v_ref=10.0)
    safety = prediction.SafetySpec(dx_max=10.0, dy_max=2.5, y_min=-7.0, y_max=1.85,
                                   psi_min=-0.6, psi_max=0.6, kappa=10.0, tau=0.1)
    pols = PolicySet((
        Policy(0, "maintain-speed", {"v_nominal": 10.0, "y_target": 0.0}),
        Policy(1, "slow-down", {"decel": 3.0, "v_floor": 4.0, "y_target": 0.0}),
    ), VEHICLE, u_min=[-6.0, -0.6], u_max=[4.0, 0.6])
    predictor = prediction.PredictiveModel(pols, safety, eta=1.0, horizon=4)
    S, ref = ramp.reference(0.0)
    risk_spec = (risk_mod.RiskSpec("cvar", alpha) if mode == "branch"
                 else risk_mod.RiskSpec("expectation"))
    planner = ocp.PlannerConfig(
        model=VEHICLE, m=2, M=5, depth=1, dt=0.2,
        cost=ocp.CostSpec(Q=np.diag([0.5, 0.5, 0.1]), R=np.diag([0.1, 0.5]),
                          x_ref=ref, S=S, beta=100.0),
        predictor=predictor, u_min=[-6.0, -0.6], u_max=[4.0, 0.6],
        risk=risk_spec, sqp_iterations=sqp_iterations, mode=mode)
    return ScenarioConfig(
        kind="merge", planner=planner,
        x0=np.array([0.0, -6.0, 10.0, np.arctan(ramp.slope)]),
        z0=np.array([8.0, 0.0, 10.0, 0.0]),
        duration=duration, seed=seed, adversary_rule=adversary_rule,
        update_period=10 ** 6,  # the main-lane vehicle holds its policy
        initial_policy=0, lane_width=3.7, n_lanes=1, ramp=ramp)


def quadruped_scenario(*, alpha: float = 0.9, seed: int = 0, mode: str = "branch",
                       duration: float = 12.0, adversary_rule: str = "sample",
                       sqp_iterations: int = 2) -> ScenarioConfig:
    """Waypoint walk across the path of a second robot that may stop or stride."""
    safety = prediction.SafetySpec(dx_max=0.8, dy_max=0.8, y_min=-5.0, y_max=5.0,
                                   psi_min=-3.1, psi_max=3.1, kappa=10.0, tau=0.1)
    pols = PolicySet((
        Policy(0, "constant-forward", {"v_nominal": 0.4}),
        Policy(1, "stop", {}),
    ), QUADRUPED, u_min=[-0.6, -0.4, -1.0], u_max=[0.6, 0.4, 1.0])
    predictor = prediction.PredictiveModel(pols, safety, eta=1.0, horizon=4,
                                           geometry="circle")
    risk_spec = (risk_mod.RiskSpec("cvar", alpha) if mode == "branch"
                 else risk_mod.RiskSpec("expectation"))
    waypoints = np.array([[3.0, 0.0], [3.0, 2.0]])
    planner = ocp.PlannerConfig(
        model=QUADRUPED, m=2, M=4, depth=2, dt=0.25,
        cost=ocp.CostSpec(Q=np.diag([1.0, 1.0, 0.0]),
                          R=np.diag([0.1, 2.0, 0.05]),  # sidestep is discouraged
                          x_ref=np.array([waypoints[0][0], waypoints[0][1], 0.0]),
                          beta=100.0, omega=0.1),
        predictor=predictor, u_min=[-0.6, -0.4, -1.0], u_max=[0.6, 0.4, 1.0],
        risk=risk_spec, sqp_iterations=sqp_iterations, mode=mode)
    return ScenarioConfig(
        kind="quadruped-waypoint", planner=planner,
        x0=np.array([0.0, 0.0, 0.0]),
        z0=np.array([1.8, -1.2, np.pi / 2]),   # crossing from the right
        duration=duration, seed=seed, adversary_rule=adversary_rule,
        update_period=planner.M, initial_policy=0, waypoints=waypoints)


SCENARIOS = {
    "overtake": overtake_scenario,
    "merge": merge_scenario,
    "quadruped-waypoint": quadruped_scenario,
}
