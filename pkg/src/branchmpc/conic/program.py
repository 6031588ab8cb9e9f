"""Problem and solution containers for the embedded conic solver.

Canonical form:

    minimize    0.5 x'Px + q'x
    subject to  A x = b
                G x <= h            (elementwise)
                F_k x + g_k in SOC  (per cone block k)

where SOC membership of a vector (t, u) means ||u|| <= t. Matrices may be
dense numpy arrays or scipy.sparse; the solver picks its linear-algebra path
from size and sparsity.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


def _as_matrix(M, shape_hint=None):
    if M is None:
        return None
    if sp.issparse(M):
        return M.tocsr()
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("matrices must be 2-d")
    return M


@dataclass
class SecondOrderCone:
    F: object  # (d, n) map
    g: np.ndarray  # (d,)

    def __post_init__(self):
        self.F = _as_matrix(self.F)
        self.g = np.asarray(self.g, dtype=float).ravel()
        if self.F.shape[0] != self.g.shape[0]:
            raise ValueError("cone map and offset disagree on dimension")
        if self.F.shape[0] < 2:
            raise ValueError("cone blocks must have dimension >= 2")

    @property
    def dim(self) -> int:
        return self.F.shape[0]


@dataclass
class ConicProgram:
    n: int
    P: object = None
    q: np.ndarray = None
    A: object = None
    b: np.ndarray = None
    G: object = None
    h: np.ndarray = None
    cones: list = field(default_factory=list)
    r: float = 0.0  # objective constant, reported in objective values

    def __post_init__(self):
        self.P = _as_matrix(self.P)
        self.q = np.zeros(self.n) if self.q is None else np.asarray(self.q, dtype=float).ravel()
        self.A = _as_matrix(self.A)
        self.G = _as_matrix(self.G)
        self.b = None if self.b is None else np.asarray(self.b, dtype=float).ravel()
        self.h = None if self.h is None else np.asarray(self.h, dtype=float).ravel()
        self.validate()

    def validate(self) -> None:
        n = self.n
        if n < 1:
            raise ValueError("need at least one variable")
        if self.q.shape != (n,):
            raise ValueError(f"linear term has shape {self.q.shape}, expected ({n},)")
        if self.P is not None:
            if self.P.shape != (n, n):
                raise ValueError("quadratic term shape mismatch")
            asym = _norm(self.P - self.P.T)
            if asym > 1e-8 * (1.0 + _norm(self.P)):
                raise ValueError("quadratic term must be symmetric")
            if not sp.issparse(self.P):
                # PSD check by attempted factorization, with jitter for the
                # (common) rank-deficient case
                scale = max(1.0, float(np.abs(self.P).max()))
                try:
                    np.linalg.cholesky(self.P + 1e-10 * scale * np.eye(n))
                except np.linalg.LinAlgError:
                    raise ValueError("quadratic term is not positive semidefinite") from None
        if (self.A is None) != (self.b is None):
            raise ValueError("equality matrix and rhs must come together")
        if self.A is not None:
            if self.A.shape[1] != n or self.A.shape[0] != self.b.shape[0]:
                raise ValueError("equality system dimensions inconsistent")
        if (self.G is None) != (self.h is None):
            raise ValueError("inequality matrix and rhs must come together")
        if self.G is not None:
            if self.G.shape[1] != n or self.G.shape[0] != self.h.shape[0]:
                raise ValueError("inequality system dimensions inconsistent")
        for k, cone in enumerate(self.cones):
            if cone.F.shape[1] != n:
                raise ValueError(f"cone block {k} has {cone.F.shape[1]} columns, expected {n}")

    @property
    def n_eq(self) -> int:
        return 0 if self.A is None else self.A.shape[0]

    @property
    def n_ineq(self) -> int:
        return 0 if self.G is None else self.G.shape[0]


@dataclass
class Solution:
    status: str  # optimal | infeasible | unbounded | max-iterations
    x: np.ndarray
    y: np.ndarray              # equality duals
    z_ineq: np.ndarray         # orthant duals
    z_cones: list              # per-cone dual blocks
    s_ineq: np.ndarray         # orthant slacks
    s_cones: list              # per-cone slack blocks
    objective: float
    dual_objective: float
    iterations: int
    solve_time: float
    primal_residual: float
    dual_residual: float
    gap: float
    message: str = ""
    trace: list = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _norm(M) -> float:
    if M is None:
        return 0.0
    if sp.issparse(M):
        data = M.tocoo().data
        return float(np.max(np.abs(data))) if data.size else 0.0
    return float(np.max(np.abs(M))) if M.size else 0.0


def _write_matrix(out: io.StringIO, name: str, M) -> None:
    if M is None:
        out.write(f"{name} 0 0 0\n")
        return
    coo = sp.coo_matrix(M)
    out.write(f"{name} {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
    for i, j, v in zip(coo.row, coo.col, coo.data):
        out.write(f"{int(i)} {int(j)} {float(v)!r}\n")


def _write_vector(out: io.StringIO, name: str, v) -> None:
    if v is None:
        out.write(f"{name} 0\n")
        return
    out.write(f"{name} {v.shape[0]}\n")
    for val in v:
        out.write(f"{float(val)!r}\n")


def dump_program(prog: ConicProgram, path: str | None = None) -> str:
    """Serialize a program to a plain-text triplet format for external checks.

    Layout: a header line ``conicprogram n <n> cones <k>``, then sections
    ``P/A/G`` as ``<name> <rows> <cols> <nnz>`` followed by ``i j value``
    triplet lines, vectors ``q/b/h`` as ``<name> <len>`` followed by one value
    per line, and per cone ``cone <index>`` followed by its F (triplets) and
    g (vector) sections. Values use repr() so they round-trip exactly.
    """
    out = io.StringIO()
    out.write(f"conicprogram n {prog.n} cones {len(prog.cones)}\n")
    _write_matrix(out, "P", prog.P)
    _write_vector(out, "q", prog.q)
    _write_matrix(out, "A", prog.A)
    _write_vector(out, "b", prog.b)
    _write_matrix(out, "G", prog.G)
    _write_vector(out, "h", prog.h)
    for k, cone in enumerate(prog.cones):
        out.write(f"cone {k}\n")
        _write_matrix(out, "F", cone.F)
        _write_vector(out, "g", cone.g)
    text = out.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
