"""Scenario-tree topology, adversary propagation, and branch weights.

A tree is a list of branches of M nodes each; every branch's children start
one step after it ends. Branch weights follow the recursion w_child =
w_parent * P(policy | planned ego children, adversary rollouts), with analytic
gradients w.r.t. the planned ego states, accumulated by the product rule.

The trajectory-tree layout enforces causality: all m sibling branches share a
single state variable at their common first node, so plans cannot anticipate
which policy the adversary will pick before it branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import policies as policies_mod
from . import prediction
from .models import ModelKind


@dataclass
class Branch:
    id: int
    policy_id: int
    t0: int
    tf: int
    parent: int | None
    children: list[int] = field(default_factory=list)
    weight: float = 1.0
    cond_prob: float = 1.0
    z: np.ndarray | None = None  # (length, n_z) adversary rollout

    @property
    def length(self) -> int:
        return self.tf - self.t0 + 1

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class ScenarioTree:
    branches: list[Branch]
    m: int
    M: int
    depth: int
    dt: float

    @property
    def horizon(self) -> int:
        return (self.depth + 1) * self.M

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def leaves(self) -> list[Branch]:
        return [b for b in self.branches if b.is_leaf]

    def validate(self) -> None:
        for b in self.branches:
            if b.tf < b.t0:
                raise ValueError(f"branch {b.id} has tf < t0")
            for c in b.children:
                if self.branches[c].t0 != b.tf + 1:
                    raise ValueError(f"child {c} does not start right after branch {b.id}")
            if b.children and len(b.children) != self.m:
                raise ValueError(f"branching node {b.id} has {len(b.children)} children, expected {self.m}")
        if self.m > 1:
            expected = (self.m ** (self.depth + 1) - 1) // (self.m - 1)
        else:
            expected = self.depth + 1
        if len(self.branches) != expected:
            raise ValueError(f"expected {expected} branches, got {len(self.branches)}")


def build_topology(m: int, M: int, depth: int, dt: float) -> ScenarioTree:
    """Topology-only tree: root spans steps 0..M-1, branching every M steps."""
    if m < 1 or M < 1 or depth < 0:
        raise ValueError("need m >= 1, M >= 1, depth >= 0")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    branches = [Branch(id=0, policy_id=0, t0=0, tf=M - 1, parent=None)]
    frontier = [0]
    for _ in range(depth):
        next_frontier = []
        for pid in frontier:
            parent = branches[pid]
            for j in range(m):
                bid = len(branches)
                branches.append(Branch(id=bid, policy_id=j, t0=parent.tf + 1,
                                       tf=parent.tf + M, parent=pid))
                parent.children.append(bid)
                next_frontier.append(bid)
        frontier = next_frontier
    tree = ScenarioTree(branches=branches, m=m, M=M, depth=depth, dt=dt)
    tree.validate()
    return tree


def propagate_scenarios(tree: ScenarioTree, z0: np.ndarray,
                        policies: policies_mod.PolicySet, dt: float,
                        current_policy: int = 0) -> ScenarioTree:
    """Fill per-branch adversary rollouts; the root continues current_policy."""
    if len(policies) != tree.m:
        raise ValueError(f"policy set size {len(policies)} does not match tree m={tree.m}")
    root = tree.branches[0]
    root.policy_id = current_policy
    root.z = policies_mod.rollout(policies, current_policy, z0, root.length - 1, dt)
    for b in tree.branches:
        if b.id == 0:
            continue
        z_parent_last = tree.branches[b.parent].z[-1]
        # rollout returns the seed state first; drop it, it belongs to the parent
        b.z = policies_mod.rollout(policies, b.policy_id, z_parent_last, b.length, dt)[1:]
    return tree


@dataclass
class TrajectoryTree:
    """Ego plan over a scenario tree, with the shared-variable slot map.

    slots[i][k] is the state-variable slot of branch i's k-th node; sibling
    branches share slots[·][0]. flat_states() collapses the per-branch arrays
    onto the slots (shared entries must agree, last writer wins).
    """
    x: list[np.ndarray]
    u: list[np.ndarray]
    slots: list[np.ndarray]
    n_slots: int
    n_x: int
    n_u: int

    @classmethod
    def zeros(cls, tree: ScenarioTree, model: ModelKind) -> "TrajectoryTree":
        slots: list[np.ndarray] = []
        group_slot: dict[int, int] = {}  # parent id -> shared first slot of its children
        n = 0
        for b in tree.branches:
            s = np.empty(b.length, dtype=int)
            if b.parent is None:
                s[:] = np.arange(n, n + b.length)
                n += b.length
            else:
                if b.parent not in group_slot:
                    group_slot[b.parent] = n
                    n += 1
                s[0] = group_slot[b.parent]
                s[1:] = np.arange(n, n + b.length - 1)
                n += b.length - 1
            slots.append(s)
        x = [np.zeros((b.length, model.n_x)) for b in tree.branches]
        u = [np.zeros((b.length, model.n_u)) for b in tree.branches]
        return cls(x=x, u=u, slots=slots, n_slots=n, n_x=model.n_x, n_u=model.n_u)

    def copy(self) -> "TrajectoryTree":
        return TrajectoryTree(x=[a.copy() for a in self.x], u=[a.copy() for a in self.u],
                              slots=self.slots, n_slots=self.n_slots, n_x=self.n_x, n_u=self.n_u)

    def flat_states(self) -> np.ndarray:
        flat = np.zeros((self.n_slots, self.n_x))
        for xi, si in zip(self.x, self.slots):
            flat[si] = xi
        return flat

    def set_flat_states(self, flat: np.ndarray) -> None:
        for xi, si in zip(self.x, self.slots):
            xi[:] = flat[si]

    def shared_consistent(self, tol: float = 1e-9) -> bool:
        flat = self.flat_states()
        return all(np.allclose(xi, flat[si], atol=tol) for xi, si in zip(self.x, self.slots))


@dataclass
class WeightInfo:
    weights: np.ndarray    # (n_branches,)
    cond: np.ndarray       # (n_branches,) conditional probability given parent
    grad: np.ndarray       # (n_branches, n_slots, 2): d w_i / d (slot position)


def compute_weights(tree: ScenarioTree, traj: TrajectoryTree,
                    model: prediction.PredictiveModel) -> WeightInfo:
    """Branch weights and their gradients w.r.t. the planned ego states."""
    nb = tree.n_branches
    w = np.zeros(nb)
    cond = np.zeros(nb)
    grad = np.zeros((nb, traj.n_slots, 2))
    w[0] = 1.0
    cond[0] = 1.0
    T = model.horizon
    for b in tree.branches:
        if b.is_leaf:
            continue
        ch = b.children
        x_children = [traj.x[c][:T] for c in ch]
        z_children = [tree.branches[c].z[:T] for c in ch]
        probs = prediction.branch_probabilities(x_children, z_children, model)
        for a, c in enumerate(ch):
            cond[c] = probs.p[a]
            w[c] = w[b.id] * probs.p[a]
            grad[c] = probs.p[a] * grad[b.id]
            for s, cs in enumerate(ch):
                sl = traj.slots[cs][:T]
                np.add.at(grad[c], sl, w[b.id] * probs.jac[a, s])
    for b in tree.branches:
        b.weight = float(w[b.id])
        b.cond_prob = float(cond[b.id])
    return WeightInfo(weights=w, cond=cond, grad=grad)


def evaluations(tree: ScenarioTree) -> list[tuple[tuple[int, ...], float]]:
    """Root-to-leaf branch-id paths with their path probability (= leaf weight)."""
    out = []
    for leaf in tree.leaves():
        path = [leaf.id]
        b = leaf
        while b.parent is not None:
            b = tree.branches[b.parent]
            path.append(b.id)
        out.append((tuple(reversed(path)), leaf.weight))
    return out
