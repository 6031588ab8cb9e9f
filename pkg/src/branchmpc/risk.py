"""CVaR of discrete distributions and the nested risk recursion over a tree.

CVaR here is the distributionally robust form: the worst-case expectation over
probability vectors q with q_i <= p_i / alpha. Its value has a closed form
(sort outcomes descending, spend the probability budget greedily); the dual
oracle enumerates the feasible basic patterns directly for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tree import ScenarioTree


@dataclass(frozen=True)
class RiskSpec:
    """Risk measure selector: expectation, or CVaR at tail mass alpha.

    alpha = 1 recovers the expectation and alpha -> 0 the worst case; the
    conventional subscript is 1 - alpha.
    """
    kind: str = "expectation"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("expectation", "cvar"):
            raise ValueError(f"kind must be 'expectation' or 'cvar', got {self.kind!r}")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")

    @property
    def effective_alpha(self) -> float:
        return 1.0 if self.kind == "expectation" else self.alpha


@dataclass(frozen=True)
class NestedRiskNode:
    branch_id: int
    cost: float
    children: tuple
    rho: float


@dataclass(frozen=True)
class DiscreteDistribution:
    outcomes: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "outcomes", np.asarray(self.outcomes, dtype=float))
        object.__setattr__(self, "probabilities", np.asarray(self.probabilities, dtype=float))
        if self.outcomes.shape != self.probabilities.shape or self.outcomes.ndim != 1:
            raise ValueError("outcomes and probabilities must be 1-d and equal length")
        if self.outcomes.size == 0:
            raise ValueError("distribution must have at least one atom")
        if np.any(self.probabilities < -1e-12):
            raise ValueError("probabilities must be nonnegative")
        if abs(float(np.sum(self.probabilities)) - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to one")

    def __len__(self) -> int:
        return self.outcomes.size


def cvar(dist: DiscreteDistribution, alpha: float) -> float:
    """CVaR at level alpha in (0, 1]; alpha=1 is the expectation, alpha->0 the max."""
    _check_alpha(alpha)
    return _cvar_values(dist.outcomes, dist.probabilities, alpha)


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")


def _cvar_values(xi: np.ndarray, p: np.ndarray, alpha: float) -> float:
    order = np.argsort(-xi)
    caps = p[order] / alpha
    budget = 1.0
    total = 0.0
    for c, v in zip(caps, xi[order]):
        take = min(c, budget)
        total += take * v
        budget -= take
        if budget <= 1e-15:
            break
    return float(total)


def cvar_dual_oracle(dist: DiscreteDistribution, alpha: float) -> float:
    """Maximize q'xi over {0 <= q <= p/alpha, sum q = 1} by enumerating patterns.

    Every vertex of that polytope saturates some coordinates at their caps and
    puts the remaining budget on one coordinate, so scanning all (subset,
    remainder-coordinate) pairs covers the optimum. Exponential in N; guarded.
    """
    _check_alpha(alpha)
    n = len(dist)
    if n > 12:
        raise ValueError("dual oracle enumeration is limited to 12 atoms")
    xi = dist.outcomes
    caps = dist.probabilities / alpha
    masks = np.arange(2 ** n, dtype=np.uint32)
    sel = (masks[:, None] >> np.arange(n, dtype=np.uint32)[None, :]) & 1  # (2^n, n)
    sel = sel.astype(float)
    capsum = sel @ caps
    feasible = capsum <= 1.0 + 1e-12
    base = sel @ (caps * xi)
    remainder = 1.0 - capsum
    best = -np.inf
    # remainder assigned to one unselected coordinate with enough cap
    fits = (sel == 0.0) & (caps[None, :] >= remainder[:, None] - 1e-12)
    cand = base[:, None] + remainder[:, None] * xi[None, :]
    cand = np.where(fits & feasible[:, None], cand, -np.inf)
    best = max(best, float(np.max(cand)))
    # exact-budget subsets need no remainder coordinate
    exact = feasible & (remainder <= 1e-12)
    if np.any(exact):
        best = max(best, float(np.max(base[exact])))
    return best


def nested_risk(tree: ScenarioTree, branch_costs: np.ndarray, alpha: float) -> tuple[float, np.ndarray]:
    """Composite risk of per-branch costs via the child-distribution recursion.

    rho_leaf = 0; rho_i = CVaR_alpha over children j of (cost_j + rho_j) under
    the conditional probabilities w_j / w_i. Returns (cost_root + rho_root,
    per-branch rho). Requires branch cond_prob fields to be populated.
    """
    _check_alpha(alpha)
    branch_costs = np.asarray(branch_costs, dtype=float)
    if branch_costs.shape != (tree.n_branches,):
        raise ValueError("need one cost per branch")
    rho = np.zeros(tree.n_branches)
    for b in sorted(tree.branches, key=lambda b: -b.t0):
        if b.is_leaf:
            continue
        vals = np.array([branch_costs[c] + rho[c] for c in b.children])
        probs = np.array([tree.branches[c].cond_prob for c in b.children])
        total = float(np.sum(probs))
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"conditional probabilities of branch {b.id} children sum to {total}")
        rho[b.id] = _cvar_values(vals, probs / total, alpha)
    return float(branch_costs[0] + rho[0]), rho


def risk_tree(tree: ScenarioTree, branch_costs: np.ndarray, alpha: float) -> list[NestedRiskNode]:
    """nested_risk results as one node per branch, for inspection and logging."""
    _, rho = nested_risk(tree, branch_costs, alpha)
    return [NestedRiskNode(branch_id=b.id, cost=float(branch_costs[b.id]),
                           children=tuple(b.children), rho=float(rho[b.id]))
            for b in tree.branches]
