"""Shared test utilities: finite differences and independent oracles."""

import numpy as np


def central_difference(f, x0, eps=1e-6):
    """Dense central-difference Jacobian of f at x0 (both 1-d arrays)."""
    x0 = np.asarray(x0, dtype=float)
    f0 = np.atleast_1d(f(x0))
    J = np.zeros((f0.size, x0.size))
    for i in range(x0.size):
        dx = np.zeros_like(x0)
        dx[i] = eps
        J[:, i] = (np.atleast_1d(f(x0 + dx)) - np.atleast_1d(f(x0 - dx))) / (2 * eps)
    return J


def rel_error(approx, exact):
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    return float(np.max(np.abs(approx - exact)) / max(1.0, np.max(np.abs(exact))))


# ---------------------------------------------------------------------------
# Independent single-trajectory MPC: a dense, from-scratch assembly used as
# the oracle for the trajectory-tree planner collapsed to one scenario.
# Variables are ordered [x_0..x_{N-1}, u_0..u_{N-1}, s_0..s_{N-1}]; dynamics
# use the scalar linearization path, not the batch kernels.
# ---------------------------------------------------------------------------

def single_trajectory_qp(x0, xbar, ubar, z_list, dt, model, cost, safety,
                         u_min, u_max, geometry="box"):
    """Dense QP linearized at (xbar, ubar); returns (program, index map)."""
    import branchmpc._kernels as kern
    from branchmpc import dynamics
    from branchmpc.conic.program import ConicProgram

    N, n_x = xbar.shape
    n_u = ubar.shape[1]
    n_con = 4 + len(z_list)
    hi = 3 if model.name == "vehicle" else 2
    S = cost.output_map(n_x)
    nv = N * (n_x + n_u + n_con)
    ix = lambda k: slice(k * n_x, (k + 1) * n_x)
    iu = lambda k: slice(N * n_x + k * n_u, N * n_x + (k + 1) * n_u)
    isl = lambda k: slice(N * (n_x + n_u) + k * n_con, N * (n_x + n_u) + (k + 1) * n_con)

    P = np.zeros((nv, nv))
    q = np.zeros(nv)
    r = 0.0
    SQS = S.T @ cost.Q @ S
    for k in range(N):
        P[ix(k), ix(k)] += 2.0 * SQS
        q[ix(k)] += -2.0 * S.T @ cost.Q @ cost.x_ref
        r += float(cost.x_ref @ cost.Q @ cost.x_ref)
        P[iu(k), iu(k)] += 2.0 * cost.R
        q[isl(k)] = cost.beta
    if cost.omega:
        for k in range(N):
            P[ix(k), ix(k)] += 2.0 * cost.omega * np.eye(n_x)
            q[ix(k)] += -2.0 * cost.omega * xbar[k]
            r += cost.omega * float(xbar[k] @ xbar[k])

    A = np.zeros((N * n_x, nv))
    b = np.zeros(N * n_x)
    A[:n_x, ix(0)] = np.eye(n_x)
    b[:n_x] = x0
    for k in range(N - 1):
        lin = dynamics.linearize(xbar[k], ubar[k], dt, model)
        rows = slice((k + 1) * n_x, (k + 2) * n_x)
        A[rows, ix(k + 1)] = np.eye(n_x)
        A[rows, ix(k)] = -lin.A
        A[rows, iu(k)] = -lin.B
        b[rows] = lin.C

    G_list, h_list = [], []

    def add_row(coeffs, rhs):
        row = np.zeros(nv)
        for idx, val in coeffs:
            row[idx] += val
        G_list.append(row)
        h_list.append(rhs)

    for k in range(N):
        for j in range(n_u):
            add_row([(iu(k).start + j, 1.0)], float(u_max[j]))
            add_row([(iu(k).start + j, -1.0)], -float(u_min[j]))
    for k in range(N):
        for c in range(n_con):
            add_row([(isl(k).start + c, -1.0)], 0.0)
    for k in range(N):
        s0 = isl(k).start
        add_row([(ix(k).start + 1, -1.0), (s0 + 0, -1.0)], -safety.y_min)
        add_row([(ix(k).start + 1, 1.0), (s0 + 1, -1.0)], safety.y_max)
        add_row([(ix(k).start + hi, -1.0), (s0 + 2, -1.0)], -safety.psi_min)
        add_row([(ix(k).start + hi, 1.0), (s0 + 3, -1.0)], safety.psi_max)
        for c, z in enumerate(z_list):
            exy = np.ascontiguousarray(xbar[k: k + 1, :2])
            zxy = np.ascontiguousarray(np.asarray(z)[k: k + 1, :2])
            if geometry == "box":
                val, grad = kern.box_collision(exy, zxy, safety.dx_max, safety.dy_max, safety.kappa)
            else:
                val, grad = kern.circle_collision(exy, zxy, safety.dx_max)
            g = grad[0]
            add_row([(ix(k).start, -g[0]), (ix(k).start + 1, -g[1]), (s0 + 4 + c, -1.0)],
                    float(val[0] - g @ xbar[k, :2] - 1.0))

    prog = ConicProgram(n=nv, P=P, q=q, A=A, b=b,
                        G=np.array(G_list), h=np.array(h_list), r=r)
    return prog, (ix, iu, isl)


def oracle_sqp_plan(x0, z_list, N, dt, model, cost, safety, u_min, u_max,
                    iterations, geometry="box", settings=None):
    """Independent SQP: zero-input cold start, relinearize, solve, repeat."""
    from branchmpc import dynamics
    from branchmpc.conic.solver import solve

    xbar = np.zeros((N, model.n_x))
    xbar[0] = x0
    for k in range(N - 1):
        xbar[k + 1] = dynamics.step(xbar[k], np.zeros(model.n_u), dt, model)
    ubar = np.zeros((N, model.n_u))
    for _ in range(iterations):
        prog, (ix, iu, _) = single_trajectory_qp(x0, xbar, ubar, z_list, dt,
                                                 model, cost, safety,
                                                 u_min, u_max, geometry)
        sol = solve(prog, settings)
        assert sol.status == "optimal", sol.status
        new_x = np.array([sol.x[ix(k)] for k in range(N)])
        new_u = np.array([sol.x[iu(k)] for k in range(N)])
        step = np.linalg.norm(new_x - xbar) + np.linalg.norm(new_u - ubar)
        xbar, ubar = new_x, new_u
        xbar[0] = x0
        if step < 1e-9:
            break
    return xbar, ubar
