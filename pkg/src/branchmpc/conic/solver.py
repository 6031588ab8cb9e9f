"""Primal-dual predictor-corrector interior-point method with NT scaling.

Handles the canonical form in program.py by stacking the orthant rows and the
cone blocks into one generalized inequality G x + s = h, s in K. Each
iteration factors one KKT matrix (dense LU for small problems, sparse LU
above a size threshold) and reuses it for the predictor and corrector solves.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lu_factor, lu_solve

from .. import _kernels as kern
from .program import ConicProgram, Solution, _norm


@dataclass
class Settings:
    tol: float = 1e-8
    reduced_tol: float = 1e-6    # feasibility acceptance when progress stalls short of tol
    reduced_relgap: float = 1e-5  # relative-gap acceptance in the same situation
    stall_iterations: int = 18   # consecutive slow-gap iterations before giving up
    max_iterations: int = 100
    step_fraction: float = 0.99
    sparse_threshold: int = 500  # KKT dimension above which sparse LU is used
    trace: bool = False


class _ConeLayout:
    """Orthant of size l followed by second-order cone blocks."""

    def __init__(self, l: int, dims: list[int]):
        self.l = l
        self.dims = dims
        self.slices = []
        off = l
        for d in dims:
            self.slices.append(slice(off, off + d))
            off += d
        self.size = off
        self.degree = l + len(dims)

    def e(self) -> np.ndarray:
        out = np.zeros(self.size)
        out[: self.l] = 1.0
        for sl in self.slices:
            out[sl.start] = 1.0
        return out

    def max_step(self, v: np.ndarray, dv: np.ndarray) -> float:
        """sup { a >= 0 : v + a dv stays in the cone }, v strictly inside."""
        step = kern.orthant_max_step(v[: self.l], dv[: self.l]) if self.l else np.inf
        for sl in self.slices:
            step = min(step, kern.soc_max_step(v[sl], dv[sl]))
        return step

    def shift_into(self, v: np.ndarray) -> np.ndarray:
        """v + (1 + a) e where a is the distance by which v misses the cone."""
        a = -np.inf
        if self.l:
            a = max(a, float(np.max(-v[: self.l])))
        for sl in self.slices:
            a = max(a, -kern.soc_residual(v[sl]))
        if a < 0.0:
            return v.copy()
        return v + (1.0 + a) * self.e()

    def mul(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.empty(self.size)
        out[: self.l] = u[: self.l] * v[: self.l]
        for sl in self.slices:
            out[sl] = kern.soc_mul(u[sl], v[sl])
        return out

    def solve_mul(self, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
        out = np.empty(self.size)
        out[: self.l] = d[: self.l] / lam[: self.l]
        for sl in self.slices:
            out[sl] = kern.soc_solve_mul(lam[sl], d[sl])
        return out


def _strictly_interior(cone: _ConeLayout, v: np.ndarray) -> bool:
    """True when v can support a scaling in floating point: every orthant
    entry positive and every cone block's Jordan determinant positive by a
    relative margin wide enough to cover summation-order differences between
    this check and the kernels' own sequential evaluation."""
    if cone.l and np.any(v[: cone.l] <= 0.0):
        return False
    eps = float(np.finfo(float).eps)
    for sl in cone.slices:
        blk = v[sl]
        tt = blk[0] * blk[0]
        uu = float(blk[1:] @ blk[1:])
        if blk[0] <= 0.0 or tt - uu <= 64.0 * eps * (tt + uu):
            return False
    return True


class _Scaling:
    """Nesterov-Todd scaling W with lam = W z = W^-T s (W symmetric here)."""

    def __init__(self, cone: _ConeLayout, s: np.ndarray, z: np.ndarray):
        self.cone = cone
        l = cone.l
        if np.any(s[:l] <= 0.0) or np.any(z[:l] <= 0.0):
            raise FloatingPointError("iterate left the orthant interior")
        self.w_lin = np.sqrt(s[:l] / z[:l])
        self.lam = np.empty(cone.size)
        self.lam[:l] = np.sqrt(s[:l] * z[:l])
        self.socs = []
        for sl in cone.slices:
            eta, wbar, lam_blk = kern.soc_nt_scaling(s[sl], z[sl])
            self.socs.append((eta, wbar))
            self.lam[sl] = lam_blk

    def apply_w(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        l = self.cone.l
        out[:l] = self.w_lin * v[:l]
        for (eta, wbar), sl in zip(self.socs, self.cone.slices):
            out[sl] = kern.soc_apply_w(eta, wbar, v[sl])
        return out

    def apply_winv(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        l = self.cone.l
        out[:l] = v[:l] / self.w_lin
        for (eta, wbar), sl in zip(self.socs, self.cone.slices):
            out[sl] = kern.soc_apply_winv(eta, wbar, v[sl])
        return out

    def wtw(self, sparse: bool):
        l = self.cone.l
        blocks = [sp.diags(self.w_lin ** 2)] if l else []
        blocks += [kern.soc_wtw_matrix(eta, wbar) for eta, wbar in self.socs]
        if sparse:
            return sp.block_diag(blocks, format="csc") if blocks else sp.csc_matrix((0, 0))
        out = np.zeros((self.cone.size, self.cone.size))
        if l:
            out[np.arange(l), np.arange(l)] = self.w_lin ** 2
        for (eta, wbar), sl in zip(self.socs, self.cone.slices):
            out[sl, sl] = kern.soc_wtw_matrix(eta, wbar)
        return out


class _KKT:
    """[[P, A', G'], [A, 0, 0], [G, 0, -W'W]] with one factorization per call."""

    def __init__(self, P, A, G, n: int, p: int, mK: int, sparse: bool):
        self.n, self.p, self.mK = n, p, mK
        self.sparse = sparse
        if sparse:
            self.P = sp.csr_matrix((n, n)) if P is None else sp.csr_matrix(P)
            self.A = sp.csr_matrix((p, n)) if A is None else sp.csr_matrix(A)
            self.G = sp.csr_matrix(G)
        else:
            self.P = np.zeros((n, n)) if P is None else np.asarray(P)
            self.A = np.zeros((p, n)) if A is None else np.asarray(A)
            self.G = np.asarray(G)
        self._mat = None
        self._fac = None

    def factor(self, wtw, reg: float = 0.0) -> None:
        n, p, mK = self.n, self.p, self.mK
        if self.sparse:
            K = sp.bmat([
                [self.P, self.A.T, self.G.T],
                [self.A, None, None],
                [self.G, None, -wtw],
            ], format="csc")
            if reg > 0.0:
                d = np.concatenate([np.full(n, reg), np.full(p, -reg), np.full(mK, -reg)])
                K = K + sp.diags(d, format="csc")
            self._mat = K
            self._fac = spla.splu(K)
        else:
            K = np.zeros((n + p + mK, n + p + mK))
            K[:n, :n] = self.P
            K[:n, n:n + p] = self.A.T
            K[:n, n + p:] = self.G.T
            K[n:n + p, :n] = self.A
            K[n + p:, :n] = self.G
            K[n + p:, n + p:] = -wtw
            if reg > 0.0:
                idx = np.arange(n + p + mK)
                K[idx, idx] += np.where(idx < n, reg, -reg)
            self._mat = K
            self._fac = lu_factor(K)

    def _raw_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.sparse:
            return self._fac.solve(rhs)
        return lu_solve(self._fac, rhs)

    def solve(self, rx: np.ndarray, ry: np.ndarray, rz: np.ndarray):
        rhs = np.concatenate([rx, ry, rz])
        sol = self._raw_solve(rhs)
        # iterative refinement recovers direction accuracy on the very
        # ill-conditioned systems that arise near degenerate cone faces
        scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
        prev = np.inf
        for _ in range(3):
            resid = rhs - self._mat @ sol
            err = float(np.max(np.abs(resid)))
            if err <= 1e-14 * scale or err >= 0.5 * prev:
                break
            sol = sol + self._raw_solve(resid)
            prev = err
        n, p = self.n, self.p
        return sol[:n], sol[n:n + p], sol[n + p:]


def _stack_inequalities(prog: ConicProgram):
    """Stack orthant rows and cone blocks into one (G, h, layout)."""
    l = prog.n_ineq
    dims = [c.dim for c in prog.cones]
    parts_G, parts_h = [], []
    if l:
        parts_G.append(prog.G)
        parts_h.append(prog.h)
    for c in prog.cones:
        parts_G.append(-c.F if sp.issparse(c.F) else -np.asarray(c.F))
        parts_h.append(c.g)
    if any(sp.issparse(M) for M in parts_G):
        G = sp.vstack([sp.csr_matrix(M) for M in parts_G], format="csr")
    else:
        G = np.vstack(parts_G)
    return G, np.concatenate(parts_h), _ConeLayout(l, dims)


def _split_solution(cone: _ConeLayout, v: np.ndarray):
    return v[: cone.l].copy(), [v[sl].copy() for sl in cone.slices]


def solve(prog: ConicProgram, settings: Settings | None = None) -> Solution:
    settings = settings or Settings()
    t0 = time.perf_counter()
    if prog.n_ineq == 0 and not prog.cones:
        return _solve_equality_qp(prog, settings, t0)

    n, p = prog.n, prog.n_eq
    G, h, cone = _stack_inequalities(prog)
    mK = cone.size
    b = prog.b if prog.b is not None else np.zeros(0)
    q = prog.q
    dim = n + p + mK
    sparse = dim > settings.sparse_threshold or sp.issparse(prog.P) \
        or sp.issparse(prog.A) or sp.issparse(G)
    kkt = _KKT(prog.P, prog.A, G, n, p, mK, sparse)
    Pmv = (lambda v: np.zeros(n)) if prog.P is None else (lambda v: prog.P @ v)
    Amv = (lambda v: np.zeros(0)) if prog.A is None else (lambda v: prog.A @ v)
    ATmv = (lambda v: np.zeros(n)) if prog.A is None else (lambda v: prog.A.T @ v)
    mat_scale = max(_norm(prog.A), _norm(G), 1.0)
    bnorm = max(1.0, float(np.linalg.norm(b)))
    hnorm = max(1.0, float(np.linalg.norm(h)))
    qnorm = max(1.0, float(np.linalg.norm(q)))
    eps = float(np.finfo(float).eps)

    eye_w = sp.identity(mK, format="csc") if sparse else np.eye(mK)
    kkt.factor(eye_w)
    x, y, zt = kkt.solve(-q, b, h)
    s = cone.shift_into(-zt)
    z = cone.shift_into(zt)

    best = None
    trace = []
    status = "max-iterations"
    message = ""
    iters = 0
    prev_gap = np.inf
    stalls = 0

    for it in range(settings.max_iterations):
        iters = it
        rx = Pmv(x) + q + ATmv(y) + G.T @ z
        ry = Amv(x) - b
        rz = G @ x + s - h
        gap = float(s @ z)
        pcost = 0.5 * float(x @ Pmv(x)) + float(q @ x) + prog.r
        dcost = pcost + float(y @ ry) + float(z @ rz) - gap
        # computed residuals bottom out at roundoff proportional to the
        # iterate's magnitude, so an iterate that has drifted to a huge norm
        # (degenerate duals have unbounded optimal faces to wander along) can
        # measure near-zero through cancellation alone; clamp to the floor of
        # what floating point can actually certify at this scale
        fp_floor = eps * mat_scale * (
            float(np.linalg.norm(x)) + float(np.linalg.norm(s))
            + float(np.linalg.norm(y)) + float(np.linalg.norm(z)))
        pres = max(
            float(np.linalg.norm(ry)) / bnorm,
            float(np.linalg.norm(rz)) / hnorm,
            fp_floor / hnorm,
        )
        dres = max(float(np.linalg.norm(rx)), fp_floor) / qnorm
        relgap = gap / max(1.0, abs(pcost))
        if settings.trace:
            trace.append({"iteration": it, "pcost": pcost, "dcost": dcost,
                          "gap": gap, "pres": pres, "dres": dres})

        merit = max(pres, dres, relgap)
        if best is None or merit < best[0]:
            best = (merit, x.copy(), y.copy(), s.copy(), z.copy(),
                    pcost, dcost, pres, dres, gap, it)

        if pres <= settings.tol and dres <= settings.tol and \
                (gap <= settings.tol or relgap <= settings.tol):
            status = "optimal"
            break

        # degenerate problems (flat optimal faces) can grind the gap to a halt
        # well inside feasibility; detect the stall and fall back to the
        # reduced-tolerance acceptance after the loop
        if pres <= 1e-4 and dres <= 1e-4 and gap > 0.95 * prev_gap:
            stalls += 1
            if stalls >= settings.stall_iterations:
                message = "progress stalled"
                break
        else:
            stalls = 0
        prev_gap = gap

        # the stall counter resets whenever feasibility wobbles, so it never
        # fires while an iterate drifts away from a converged point; if the
        # best merit has been frozen this long, nothing better is coming
        if it - best[-1] >= max(2 * settings.stall_iterations, 10):
            message = "no merit progress"
            break

        # Farkas-style primal-infeasibility certificate: G'z + A'y ~ 0 with
        # h'z + b'y < 0 proves the constraints are inconsistent; skipped while
        # the current iterate is itself nearly feasible
        cert = -(float(h @ z) + float(b @ y))
        if pres > 10.0 * settings.tol and \
                cert > 1e-8 * mat_scale * max(1.0, float(np.linalg.norm(z)) + float(np.linalg.norm(y))):
            if float(np.linalg.norm(G.T @ z + ATmv(y))) <= 1e-7 * mat_scale * cert:
                status = "infeasible"
                message = "primal infeasibility certificate found"
                break
        # unbounded ray: a cone-feasible direction with negative linear cost
        xn = float(np.linalg.norm(x))
        if xn > 1e9:
            u = x / xn
            Gu = G @ u
            ray_in_cone = (not cone.l or np.all(Gu[: cone.l] <= 1e-6 * mat_scale)) and \
                all(kern.soc_residual(-Gu[sl]) >= -1e-6 * mat_scale for sl in cone.slices)
            if float(q @ u) < -1e-6 and float(np.linalg.norm(Pmv(u))) <= 1e-6 * max(_norm(prog.P), 1.0) \
                    and float(np.linalg.norm(Amv(u))) <= 1e-6 * mat_scale and ray_in_cone:
                status = "unbounded"
                message = "descent ray found"
                break

        mu = gap / cone.degree
        try:
            scaling = _Scaling(cone, s, z)
            wtw = scaling.wtw(sparse)
            try:
                kkt.factor(wtw)
            except (RuntimeError, ValueError, np.linalg.LinAlgError):
                kkt.factor(wtw, reg=1e-9)
        except (FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
            message = f"numerical breakdown: {exc}"
            break

        dxa, dya, dza = kkt.solve(-rx, -ry, -rz + s)
        dsa = -rz - G @ dxa
        alpha_aff = min(1.0, cone.max_step(s, dsa), cone.max_step(z, dza))
        mu_aff = float((s + alpha_aff * dsa) @ (z + alpha_aff * dza)) / cone.degree
        sigma = np.clip(mu_aff / mu, 0.0, 1.0) ** 3

        lam = scaling.lam
        d = cone.mul(lam, lam) + cone.mul(scaling.apply_winv(dsa), scaling.apply_w(dza)) \
            - sigma * mu * cone.e()
        try:
            rhs3 = -rz + scaling.apply_w(cone.solve_mul(lam, d))
        except FloatingPointError as exc:
            message = f"numerical breakdown: {exc}"
            break
        dx, dy, dz = kkt.solve(-rx, -ry, rhs3)
        ds = -rz - G @ dx

        alpha = min(1.0, settings.step_fraction * cone.max_step(s, ds),
                    settings.step_fraction * cone.max_step(z, dz))
        if alpha < max(1e-4, 0.1 * alpha_aff):
            # near a degenerate face the second-order correction can point
            # almost out of the cone while the affine direction is fine;
            # retake a plain centering step with a conservative weight
            d = cone.mul(lam, lam) - max(sigma, 0.5) * mu * cone.e()
            try:
                rhs3 = -rz + scaling.apply_w(cone.solve_mul(lam, d))
            except FloatingPointError as exc:
                message = f"numerical breakdown: {exc}"
                break
            dx, dy, dz = kkt.solve(-rx, -ry, rhs3)
            ds = -rz - G @ dx
            alpha = min(1.0, settings.step_fraction * cone.max_step(s, ds),
                        settings.step_fraction * cone.max_step(z, dz))
        if not np.isfinite(alpha) or alpha <= 0.0:
            message = "step length collapsed"
            break
        # max_step is cancellation-prone at large scale, so the fractional
        # step can land on or past a boundary and break the next scaling;
        # shrink until both updates stay strictly interior
        for _ in range(40):
            s_new = s + alpha * ds
            z_new = z + alpha * dz
            if _strictly_interior(cone, s_new) and _strictly_interior(cone, z_new):
                break
            alpha *= 0.5
        else:
            message = "step length collapsed"
            break
        x += alpha * dx
        y += alpha * dy
        s = s_new
        z = z_new
    else:
        iters = settings.max_iterations

    if status in ("optimal", "max-iterations"):
        _, x, y, s, z, pcost, dcost, pres, dres, gap, bit = best
        if status == "max-iterations":
            relgap = gap / max(1.0, abs(pcost))
            if pres <= settings.reduced_tol and dres <= settings.reduced_tol and \
                    (gap <= settings.reduced_tol or relgap <= settings.reduced_relgap):
                status = "optimal"
                message = message or "converged to reduced tolerance"
    else:
        pcost = 0.5 * float(x @ Pmv(x)) + float(q @ x) + prog.r
        dcost = float("inf") if status == "infeasible" else float("-inf")
        pres = dres = gap = float("nan")

    z_lin, z_cones = _split_solution(cone, z)
    s_lin, s_cones = _split_solution(cone, s)
    return Solution(
        status=status, x=x, y=y, z_ineq=z_lin, z_cones=z_cones,
        s_ineq=s_lin, s_cones=s_cones, objective=pcost, dual_objective=dcost,
        iterations=iters, solve_time=time.perf_counter() - t0,
        primal_residual=pres, dual_residual=dres, gap=gap, message=message,
        trace=trace,
    )


def _solve_equality_qp(prog: ConicProgram, settings: Settings, t0: float) -> Solution:
    """No inequalities: solve the KKT linear system directly."""
    n, p = prog.n, prog.n_eq
    P = np.zeros((n, n)) if prog.P is None else (
        prog.P.toarray() if sp.issparse(prog.P) else np.asarray(prog.P))
    if p:
        A = prog.A.toarray() if sp.issparse(prog.A) else np.asarray(prog.A)
        K = np.block([[P, A.T], [A, np.zeros((p, p))]])
        rhs = np.concatenate([-prog.q, prog.b])
    else:
        K = P
        rhs = -prog.q
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    resid = K @ sol - rhs
    x = sol[:n]
    y = sol[n:]
    scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
    eq_res = float(np.max(np.abs(resid[n:]))) if p else 0.0
    if eq_res > 1e-8 * scale:
        status, message = "infeasible", "equality system inconsistent"
    elif float(np.max(np.abs(resid[:n]))) > 1e-8 * scale * max(1.0, _norm(P)):
        status, message = "unbounded", "stationarity unattainable"
    else:
        status, message = "optimal", ""
    pcost = 0.5 * float(x @ P @ x) + float(prog.q @ x) + prog.r
    dcost = pcost + (float(y @ (A @ x - prog.b)) if p else 0.0)
    return Solution(
        status=status, x=x, y=y, z_ineq=np.zeros(0), z_cones=[],
        s_ineq=np.zeros(0), s_cones=[], objective=pcost, dual_objective=dcost,
        iterations=0, solve_time=time.perf_counter() - t0,
        primal_residual=float(np.linalg.norm(resid[n:])) if p else 0.0,
        dual_residual=float(np.linalg.norm(resid[:n])), gap=0.0, message=message,
    )


def solve_qp(prog: ConicProgram, settings: Settings | None = None) -> Solution:
    """solve() restricted to programs without cone blocks."""
    if prog.cones:
        raise ValueError("solve_qp requires a program without cone blocks")
    return solve(prog, settings)
