"""Command-line entry points: run a scenario, sweep risk levels, verify, serve.

`run` executes one closed-loop scenario headlessly and writes its artifacts
(`run.jsonl` log, `metrics.csv` summary) to the output directory. `sweep`
repeats a scenario over a list of risk levels, one metrics row per level.
`verify` exercises the numerical cross-check suites (closed-form CVaR vs its
dual oracle, nested risk vs an independently assembled epigraph program,
finite-difference gradient checks, tree topology counts) and prints a
pass/fail table with the worst observed residual per suite. `serve` starts
the WebSocket teleoperation service.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import config as config_mod
from . import dynamics, ocp, prediction, sim
from . import policies as policies_mod
from . import risk as risk_mod
from . import tree as tree_mod
from .conic.program import ConicProgram
from .conic.solver import solve as conic_solve
from .models import QUADRUPED, VEHICLE


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (config_mod.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="branchmpc",
        description="Scenario-tree MPC toolkit: closed-loop runs, risk sweeps, "
                    "numerical verification, and a teleoperation service.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_scenario_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None,
                       help="YAML scenario file; CLI flags override its values")
        p.add_argument("--scenario", choices=sorted(sim.SCENARIOS),
                       help="scenario builder (default: overtake)")
        p.add_argument("--alpha", type=float, help="CVaR tail mass in (0, 1]")
        p.add_argument("--seed", type=int, help="random seed for the run")
        p.add_argument("--mode", choices=["branch", "robust"],
                       help="planner mode: branch MPC or the robust baseline")
        p.add_argument("--sqp-iters", type=int, dest="sqp_iters",
                       help="SQP iterations per planning step")
        p.add_argument("--duration", type=float, help="simulated seconds")
        p.add_argument("--out", type=Path, default=Path("runs"),
                       help="artifact directory (default: ./runs)")
        p.add_argument("--no-trees", action="store_true",
                       help="omit per-step trajectory-tree snapshots from the log")

    p_run = sub.add_parser("run", help="run one closed-loop scenario")
    add_scenario_flags(p_run)
    p_run.set_defaults(handler=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a scenario over several risk levels")
    add_scenario_flags(p_sweep)
    p_sweep.add_argument("--alphas", required=True,
                         help="comma-separated CVaR levels, e.g. 0.1,0.5,0.9")
    p_sweep.set_defaults(handler=_cmd_sweep)

    p_verify = sub.add_parser("verify", help="run the numerical cross-check suites")
    p_verify.set_defaults(handler=_cmd_verify)

    p_serve = sub.add_parser("serve", help="start the WebSocket teleoperation service")
    p_serve.add_argument("--port", type=int, default=8710)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--config", type=Path, default=None,
                         help="YAML scenario file used as the session default")
    p_serve.add_argument("--out", type=Path, default=Path("runs"),
                         help="directory for per-session logs")
    p_serve.set_defaults(handler=_cmd_serve)
    return parser


# ---------------------------------------------------------------------------
# run / sweep
# ---------------------------------------------------------------------------

def _mapping_from_args(args) -> dict:
    """Config-file mapping with CLI flags layered on top (flags win)."""
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                mapping = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise config_mod.ConfigError(f"{args.config}: {exc}") from exc
        if not isinstance(mapping, dict):
            raise config_mod.ConfigError(f"{args.config}: top level must be a mapping")
    else:
        mapping = {}
    for key, flag in (("scenario", args.scenario), ("alpha", args.alpha),
                      ("seed", args.seed), ("mode", args.mode),
                      ("sqp_iterations", args.sqp_iters),
                      ("duration", args.duration)):
        if flag is not None:
            mapping[key] = flag
    mapping.setdefault("scenario", "overtake")
    return mapping


def _run_one(mapping: dict, out: Path, log_name: str, include_trees: bool):
    scenario = config_mod.scenario_from_mapping(mapping)
    log = sim.run_closed_loop(scenario)
    out.mkdir(parents=True, exist_ok=True)
    log.to_jsonl(out / log_name, include_trees=include_trees)
    return sim.metrics(log)


def _cmd_run(args) -> int:
    mapping = _mapping_from_args(args)
    summary = _run_one(mapping, args.out, "run.jsonl", not args.no_trees)
    sim.write_metrics_csv([summary], args.out / "metrics.csv")
    print(f"{summary.scenario}: steps={summary.steps} "
          f"min_normalized_distance={summary.min_normalized_distance:.3f} "
          f"mean_solve={summary.mean_solve_time * 1e3:.0f}ms "
          f"log={args.out / 'run.jsonl'}")
    return 0


def _cmd_sweep(args) -> int:
    try:
        alphas = [float(tok) for tok in args.alphas.split(",") if tok.strip()]
    except ValueError:
        raise config_mod.ConfigError(f"--alphas must be comma-separated numbers, "
                                     f"got {args.alphas!r}")
    if not alphas:
        raise config_mod.ConfigError("--alphas is empty")
    rows = []
    for alpha in alphas:
        mapping = dict(_mapping_from_args(args), alpha=alpha)
        rows.append(_run_one(mapping, args.out, f"run-a{alpha:g}.jsonl",
                             not args.no_trees))
        print(f"alpha={alpha:g}: min_normalized_distance="
              f"{rows[-1].min_normalized_distance:.3f}")
    sim.write_metrics_csv(rows, args.out / "metrics.csv")
    print(f"{len(rows)} rows -> {args.out / 'metrics.csv'}")
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def _cmd_serve(args) -> int:
    import uvicorn

    from . import service

    default = None
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            default = yaml.safe_load(fh)
        if not isinstance(default, dict):
            raise config_mod.ConfigError(f"{args.config}: top level must be a mapping")
        config_mod.scenario_from_mapping(default, name=str(args.config))  # validate
    app = service.create_app(default_mapping=default, out_dir=args.out)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# verify: numerical cross-check suites
# ---------------------------------------------------------------------------

@dataclass
class SuiteResult:
    name: str
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance


def _cmd_verify(args) -> int:
    suites = [_suite_cvar_dual, _suite_nested_vs_conic, _suite_dynamics_jacobians,
              _suite_probability_jacobians, _suite_weight_gradients,
              _suite_topology]
    results = [suite() for suite in suites]
    width = max(len(r.name) for r in results) + 2
    print(f"{'suite':<{width}}{'max residual':>14}{'tolerance':>12}  status")
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}{r.residual:>14.3e}{r.tolerance:>12.0e}  {status}")
    return 0 if all(r.passed for r in results) else 1


def _suite_cvar_dual() -> SuiteResult:
    """Closed-form CVaR against the ambiguity-set enumeration oracle."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        p = rng.dirichlet(np.ones(n))
        xi = rng.normal(scale=10.0, size=n)
        dist = risk_mod.DiscreteDistribution(xi, p)
        for alpha in np.linspace(0.1, 1.0, 10):
            a = risk_mod.cvar(dist, float(alpha))
            b = risk_mod.cvar_dual_oracle(dist, float(alpha))
            worst = max(worst, abs(a - b))
    return SuiteResult("cvar-dual-equivalence", worst, 1e-9)


def _random_cond_tree(rng, m: int, depth: int) -> tree_mod.ScenarioTree:
    t = tree_mod.build_topology(m=m, M=2, depth=depth, dt=0.1)
    for b in t.branches:
        if b.is_leaf:
            continue
        probs = rng.uniform(0.2, 1.0, size=len(b.children))
        probs /= probs.sum()
        for c, pc in zip(b.children, probs):
            t.branches[c].cond_prob = float(pc)
    return t


def _nested_epigraph_program(t: tree_mod.ScenarioTree, costs: np.ndarray,
                             alpha: float) -> ConicProgram:
    """Linear epigraph of the per-node CVaR recursion, assembled from scratch."""
    nodes = [b for b in t.branches if not b.is_leaf]
    gamma = {b.id: i for i, b in enumerate(nodes)}
    zeta = {b.id: len(nodes) + i for i, b in enumerate(nodes)}
    s_index: dict[tuple[int, int], int] = {}
    n = 2 * len(nodes)
    for b in nodes:
        for c in b.children:
            s_index[(b.id, c)] = n
            n += 1
    rows, rhs = [], []
    for b in nodes:
        for c in b.children:
            # s >= cost_c + gamma_c - zeta
            row = np.zeros(n)
            row[s_index[(b.id, c)]] = -1.0
            row[zeta[b.id]] = -1.0
            if c in gamma:
                row[gamma[c]] = 1.0
            rows.append(row)
            rhs.append(-float(costs[c]))
            row = np.zeros(n)
            row[s_index[(b.id, c)]] = -1.0   # s >= 0
            rows.append(row)
            rhs.append(0.0)
        # gamma >= zeta + (1/alpha) sum_c p_c s_c
        row = np.zeros(n)
        row[gamma[b.id]] = -1.0
        row[zeta[b.id]] = 1.0
        for c in b.children:
            row[s_index[(b.id, c)]] = t.branches[c].cond_prob / alpha
        rows.append(row)
        rhs.append(0.0)
    q = np.zeros(n)
    q[gamma[0]] = 1.0
    return ConicProgram(n=n, q=q, G=np.array(rows), h=np.array(rhs),
                        r=float(costs[0]))


def _suite_nested_vs_conic() -> SuiteResult:
    """Nested-risk recursion against a from-scratch epigraph program."""
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        m, depth = (2, 2) if rng.random() < 0.5 else (3, 1)
        t = _random_cond_tree(rng, m, depth)
        costs = rng.normal(scale=5.0, size=t.n_branches)
        for alpha in (0.2, 0.5, 1.0):
            total, _ = risk_mod.nested_risk(t, costs, alpha)
            sol = conic_solve(_nested_epigraph_program(t, costs, alpha))
            if sol.status not in ("optimal", "reduced-accuracy"):
                worst = np.inf
                continue
            worst = max(worst, abs(sol.objective - total))
    return SuiteResult("nested-risk-vs-conic", worst, 1e-5)


def _suite_dynamics_jacobians() -> SuiteResult:
    """Discrete-step Jacobians against central finite differences."""
    rng = np.random.default_rng(2)
    dt, eps = 0.1, 1e-6
    worst = 0.0
    for model in (VEHICLE, QUADRUPED):
        for _ in range(50):
            x = rng.normal(scale=2.0, size=model.n_x)
            u = rng.normal(scale=0.5, size=model.n_u)
            lin = dynamics.linearize(x, u, dt, model)
            for j in range(model.n_x):
                d = np.zeros(model.n_x)
                d[j] = eps
                col = (dynamics.step(x + d, u, dt, model)
                       - dynamics.step(x - d, u, dt, model)) / (2 * eps)
                worst = max(worst, float(np.abs(col - lin.A[:, j]).max()))
            for j in range(model.n_u):
                d = np.zeros(model.n_u)
                d[j] = eps
                col = (dynamics.step(x, u + d, dt, model)
                       - dynamics.step(x, u - d, dt, model)) / (2 * eps)
                worst = max(worst, float(np.abs(col - lin.B[:, j]).max()))
    return SuiteResult("dynamics-jacobians", worst, 1e-4)


def _verify_policies() -> policies_mod.PolicySet:
    return policies_mod.PolicySet(
        (policies_mod.Policy(0, "maintain-speed", {"v_nominal": 9.0, "y_target": 0.0}),
         policies_mod.Policy(1, "slow-down", {"decel": 2.0, "v_floor": 3.0,
                                              "y_target": 0.0}),
         policies_mod.Policy(2, "lane-change", {"v_nominal": 9.0, "y_target": 3.7})),
        VEHICLE, u_min=[-6.0, -0.6], u_max=[4.0, 0.6])


def _verify_model(pset) -> prediction.PredictiveModel:
    safety = prediction.SafetySpec(dx_max=10.0, dy_max=2.5, y_min=-1.85, y_max=5.55,
                                   psi_min=-0.6, psi_max=0.6, kappa=10.0, tau=0.1)
    return prediction.PredictiveModel(pset, safety, eta=1.0, horizon=3)


def _suite_probability_jacobians() -> SuiteResult:
    """Branching-probability Jacobians against central finite differences."""
    rng = np.random.default_rng(3)
    pset = _verify_policies()
    model = _verify_model(pset)
    T = model.horizon
    eps, worst = 1e-6, 0.0
    for _ in range(20):
        z0 = np.array([rng.uniform(5.0, 15.0), rng.uniform(-1.0, 3.0),
                       rng.uniform(5.0, 10.0), 0.0])
        z_children = [policies_mod.rollout(pset, j, z0, T, 0.1)[1:]
                      for j in range(len(pset))]
        x_children = [np.column_stack([
            np.linspace(0.0, 3.0, T) + rng.normal(scale=0.5, size=T),
            rng.normal(scale=1.0, size=T),
            np.full(T, 9.0), np.zeros(T)]) for _ in range(len(pset))]
        probs = prediction.branch_probabilities(x_children, z_children, model)
        for j in range(len(pset)):
            for k in range(T):
                for d in range(2):
                    hi = [xc.copy() for xc in x_children]
                    lo = [xc.copy() for xc in x_children]
                    hi[j][k, d] += eps
                    lo[j][k, d] -= eps
                    p_hi = prediction.branch_probabilities(hi, z_children, model).p
                    p_lo = prediction.branch_probabilities(lo, z_children, model).p
                    fd = (p_hi - p_lo) / (2 * eps)
                    worst = max(worst,
                                float(np.abs(fd - probs.jac[:, j, k, d]).max()))
    return SuiteResult("probability-jacobians", worst, 1e-4)


def _suite_weight_gradients() -> SuiteResult:
    """Tree weight gradients against central finite differences."""
    rng = np.random.default_rng(4)
    pset = _verify_policies()
    model = _verify_model(pset)
    eps, worst = 1e-6, 0.0
    for _ in range(5):
        t = tree_mod.build_topology(m=3, M=3, depth=1, dt=0.1)
        tree_mod.propagate_scenarios(t, np.array([10.0, 0.0, 8.0, 0.0]), pset, 0.1)
        traj = tree_mod.TrajectoryTree.zeros(t, VEHICLE)
        flat = traj.flat_states()
        flat[:, 0] = np.linspace(0.0, 4.0, flat.shape[0])
        flat[:, :2] += rng.normal(scale=1.0, size=(flat.shape[0], 2))
        flat[:, 2] = 9.0
        traj.set_flat_states(flat)
        info = tree_mod.compute_weights(t, traj, model)

        base = traj.flat_states()
        for slot in range(traj.n_slots):
            for d in range(2):
                for sign in (1.0, -1.0):
                    pert = base.copy()
                    pert[slot, d] += sign * eps
                    tt = traj.copy()
                    tt.set_flat_states(pert)
                    w = tree_mod.compute_weights(t, tt, model).weights
                    if sign > 0:
                        w_hi = w
                    else:
                        fd = (w_hi - w) / (2 * eps)
                        worst = max(worst,
                                    float(np.abs(fd - info.grad[:, slot, d]).max()))
    return SuiteResult("weight-gradients", worst, 1e-4)


def _suite_topology() -> SuiteResult:
    """Branch counts for the two reference shapes, plus leaf-mass conservation."""
    t7 = tree_mod.build_topology(m=2, M=3, depth=2, dt=0.1)
    t13 = tree_mod.build_topology(m=3, M=8, depth=2, dt=0.1)
    residual = float(abs(t7.n_branches - 7) + abs(t13.n_branches - 13))

    pset = _verify_policies()
    model = _verify_model(pset)
    t = tree_mod.build_topology(m=3, M=3, depth=2, dt=0.1)
    tree_mod.propagate_scenarios(t, np.array([12.0, 0.0, 8.0, 0.0]), pset, 0.1)
    traj = tree_mod.TrajectoryTree.zeros(t, VEHICLE)
    flat = traj.flat_states()
    flat[:, 0] = np.linspace(0.0, 3.0, flat.shape[0])
    flat[:, 2] = 9.0
    traj.set_flat_states(flat)
    info = tree_mod.compute_weights(t, traj, model)
    leaf_mass = sum(info.weights[b.id] for b in t.branches if b.is_leaf)
    residual = max(residual, abs(leaf_mass - 1.0))
    return SuiteResult("topology-counts", residual, 1e-12)


if __name__ == "__main__":
    sys.exit(main())
