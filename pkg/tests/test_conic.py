import itertools

import numpy as np
import pytest

from branchmpc.conic import ConicProgram, SecondOrderCone, Settings, dump_program, solve, solve_qp

rng = np.random.default_rng(41)


def _random_psd(n, rank=None):
    M = rng.normal(size=(n, rank or n))
    return M @ M.T


def test_unconstrained_shifted_quadratic():
    # min (x-1)^2 = x^2 - 2x + 1
    prog = ConicProgram(n=1, P=[[2.0]], q=[-2.0], r=1.0)
    sol = solve(prog)
    assert sol.status == "optimal"
    assert abs(sol.x[0] - 1.0) < 1e-9
    assert abs(sol.objective) < 1e-9


def test_norm_epigraph():
    # min t  s.t. ||(3,4)|| <= t
    cone = SecondOrderCone(F=[[1.0], [0.0], [0.0]], g=[0.0, 3.0, 4.0])
    prog = ConicProgram(n=1, q=[1.0], cones=[cone])
    sol = solve(prog)
    assert sol.status == "optimal"
    assert abs(sol.x[0] - 5.0) < 1e-7


def test_equality_qp_matches_kkt_oracle():
    for _ in range(20):
        n, p = 8, 3
        P = _random_psd(n) + np.eye(n)
        q = rng.normal(size=n)
        A = rng.normal(size=(p, n))
        b = rng.normal(size=p)
        K = np.block([[P, A.T], [A, np.zeros((p, p))]])
        ref = np.linalg.solve(K, np.concatenate([-q, b]))
        sol = solve(ConicProgram(n=n, P=P, q=q, A=A, b=b))
        assert sol.status == "optimal"
        assert np.abs(sol.x - ref[:n]).max() < 1e-7


def test_ipm_on_equality_qp_with_inactive_bounds():
    # same oracle, but forcing the interior-point path with slack bounds
    for _ in range(10):
        n, p = 6, 2
        P = _random_psd(n) + np.eye(n)
        q = rng.normal(size=n)
        A = rng.normal(size=(p, n))
        b = rng.normal(size=p) * 0.1
        K = np.block([[P, A.T], [A, np.zeros((p, p))]])
        ref = np.linalg.solve(K, np.concatenate([-q, b]))[:n]
        G = np.vstack([np.eye(n), -np.eye(n)])
        h = np.full(2 * n, np.abs(ref).max() * 10 + 10)
        sol = solve(ConicProgram(n=n, P=P, q=q, A=A, b=b, G=G, h=h))
        assert sol.status == "optimal"
        assert np.abs(sol.x - ref).max() < 1e-7


def test_box_qp_active_multiplier():
    # min x^2 s.t. x >= 1: x* = 1, multiplier 2 (stationarity 2x - z = 0)
    prog = ConicProgram(n=1, P=[[2.0]], q=[0.0], G=[[-1.0]], h=[-1.0])
    sol = solve_qp(prog)
    assert sol.status == "optimal"
    assert abs(sol.x[0] - 1.0) < 1e-7
    assert abs(sol.z_ineq[0] - 2.0) < 1e-6


def test_infeasible_box():
    # x <= 0 and x >= 1 cannot hold
    prog = ConicProgram(n=1, q=[0.0], G=[[1.0], [-1.0]], h=[0.0, -1.0])
    sol = solve_qp(prog)
    assert sol.status == "infeasible"


def test_unbounded_lp():
    prog = ConicProgram(n=1, q=[-1.0], G=[[-1.0]], h=[0.0])  # min -x, x >= 0
    sol = solve_qp(prog)
    assert sol.status == "unbounded"


def test_simplex_lp_matches_vertex_enumeration():
    for _ in range(10):
        n = 5
        c = rng.normal(size=n)
        prog = ConicProgram(n=n, q=c, A=np.ones((1, n)), b=[1.0],
                            G=-np.eye(n), h=np.zeros(n))
        sol = solve_qp(prog)
        assert sol.status == "optimal"
        best_vertex = min(float(c[i]) for i in range(n))  # vertices are unit vectors
        assert abs(sol.objective - best_vertex) < 1e-7
        assert abs(sol.x[int(np.argmin(c))] - 1.0) < 1e-5


def _random_feasible_socp(n=8, l=6, n_cones=2, p=2, with_P=True, seed=None):
    local = np.random.default_rng(seed)
    x0 = local.normal(size=n)
    P = None
    if with_P:
        M = local.normal(size=(n, n - 2))
        P = M @ M.T + 0.1 * np.eye(n)
    q = local.normal(size=n)
    A = local.normal(size=(p, n)) if p else None
    b = A @ x0 if p else None
    G = local.normal(size=(l, n))
    h = G @ x0 + local.uniform(0.5, 2.0, size=l)  # strictly feasible slack
    if not with_P:
        # box the variables so pure-LP objectives stay bounded
        R = float(np.abs(x0).max()) + 50.0
        G = np.vstack([G, np.eye(n), -np.eye(n)])
        h = np.concatenate([h, np.full(n, R), np.full(n, R)])
    cones = []
    for _ in range(n_cones):
        d = int(local.integers(3, 6))
        F = local.normal(size=(d, n))
        g = -F @ x0
        g[0] += np.linalg.norm((F @ x0 + g)[1:]) + local.uniform(1.0, 2.0)  # interior
        cones.append(SecondOrderCone(F=F, g=g))
    return ConicProgram(n=n, P=P, q=q, A=A, b=b, G=G, h=h, cones=cones)


def _kkt_residuals(prog, sol):
    x = sol.x
    r_eq = 0.0 if prog.A is None else float(np.abs(prog.A @ x - prog.b).max())
    viol = 0.0
    if prog.G is not None:
        viol = max(viol, float(np.max(prog.G @ x - prog.h)))
    for cone in prog.cones:
        v = cone.F @ x + cone.g
        viol = max(viol, float(np.linalg.norm(v[1:]) - v[0]))
    Px = np.zeros(prog.n) if prog.P is None else prog.P @ x
    grad = Px + prog.q
    if prog.A is not None:
        grad = grad + prog.A.T @ sol.y
    if prog.G is not None:
        grad = grad + prog.G.T @ sol.z_ineq
    for cone, z in zip(prog.cones, sol.z_cones):
        grad = grad - cone.F.T @ z
    return r_eq, viol, float(np.abs(grad).max())


@pytest.mark.parametrize("with_P", [True, False])
def test_socp_invariants_random_battery(with_P):
    for seed in range(25):
        prog = _random_feasible_socp(with_P=with_P, seed=seed)
        sol = solve(prog)
        assert sol.status == "optimal", f"seed {seed}: {sol.status} {sol.message}"
        b_norm = 0.0 if prog.b is None else float(np.linalg.norm(prog.b))
        r_eq, viol, stat = _kkt_residuals(prog, sol)
        assert r_eq <= 1e-6 * (1.0 + b_norm)
        assert viol <= 1e-6
        assert stat <= 1e-6 * (1.0 + float(np.abs(prog.q).max()))
        assert sol.gap <= 1e-6 * (1.0 + abs(sol.objective))
        assert sol.dual_objective <= sol.objective + 1e-6


def test_deterministic_iterates():
    prog = _random_feasible_socp(seed=123)
    s = Settings(trace=True)
    a = solve(prog, s)
    b = solve(prog, s)
    assert a.iterations == b.iterations
    assert np.array_equal(a.x, b.x)
    for ta, tb in zip(a.trace, b.trace):
        assert ta == tb


def test_cone_duals_are_in_the_dual_cone():
    prog = _random_feasible_socp(seed=7)
    sol = solve(prog)
    assert np.all(sol.z_ineq >= -1e-9)
    for z in sol.z_cones:
        assert z[0] >= np.linalg.norm(z[1:]) - 1e-7


def test_validation_errors():
    with pytest.raises(ValueError):
        ConicProgram(n=2, q=[1.0])  # wrong q length
    with pytest.raises(ValueError):
        ConicProgram(n=2, P=[[1.0, 2.0], [0.0, 1.0]])  # asymmetric
    with pytest.raises(ValueError):
        ConicProgram(n=1, P=[[-1.0]])  # not PSD
    with pytest.raises(ValueError):
        ConicProgram(n=2, A=np.eye(2))  # A without b
    with pytest.raises(ValueError):
        ConicProgram(n=2, q=[0.0, 0.0], cones=[SecondOrderCone(F=[[1.0]], g=[0.0])])
    with pytest.raises(ValueError):
        solve_qp(ConicProgram(n=1, q=[1.0],
                              cones=[SecondOrderCone(F=[[1.0], [0.0]], g=[0.0, 1.0])]))


def test_sparse_inputs_give_same_answer():
    import scipy.sparse as sp
    prog_dense = _random_feasible_socp(seed=99)
    prog_sparse = ConicProgram(
        n=prog_dense.n, P=sp.csr_matrix(prog_dense.P), q=prog_dense.q,
        A=sp.csr_matrix(prog_dense.A), b=prog_dense.b,
        G=sp.csr_matrix(prog_dense.G), h=prog_dense.h,
        cones=[SecondOrderCone(F=sp.csr_matrix(c.F), g=c.g) for c in prog_dense.cones],
    )
    a = solve(prog_dense)
    b = solve(prog_sparse)
    assert a.status == b.status == "optimal"
    assert np.abs(a.x - b.x).max() < 1e-6


def test_dump_format_roundtrip_parse():
    prog = _random_feasible_socp(seed=5)
    text = dump_program(prog)
    lines = text.splitlines()
    assert lines[0] == f"conicprogram n {prog.n} cones {len(prog.cones)}"
    # every declared section header is present with parseable triplet counts
    headers = [ln for ln in lines if ln.split()[0] in ("P", "q", "A", "b", "G", "h", "F", "g", "cone")]
    assert len(headers) >= 8
    name, rows, cols, nnz = lines[1].split()
    assert name == "P" and int(rows) == prog.n and int(cols) == prog.n
    # triplets reconstruct P exactly
    P = np.zeros((prog.n, prog.n))
    for ln in lines[2:2 + int(nnz)]:
        i, j, v = ln.split()
        P[int(i), int(j)] = float(v)
    assert np.allclose(P, prog.P, atol=0.0)


def test_optional_cvxpy_cross_check():
    cp = pytest.importorskip("cvxpy")
    prog = _random_feasible_socp(seed=17)
    x = cp.Variable(prog.n)
    obj = 0.5 * cp.quad_form(x, cp.psd_wrap(prog.P)) + prog.q @ x
    cons = [prog.A @ x == prog.b, prog.G @ x <= prog.h]
    for cone in prog.cones:
        v = cone.F @ x + cone.g
        cons.append(cp.norm(v[1:]) <= v[0])
    cp.Problem(cp.Minimize(obj), cons).solve(solver=cp.CLARABEL)
    sol = solve(prog)
    assert sol.status == "optimal"
    assert abs(sol.objective - float(obj.value)) < 1e-5 * (1 + abs(sol.objective))
