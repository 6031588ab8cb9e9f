# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numeric kernels: the hot inner loops of the planner and solver.

Mirrors ``pure.py`` function for function; the test suite asserts elementwise
agreement, and ``_kernels/__init__`` selects whichever backend imports.
"""

from libc.math cimport cos, exp, fabs, log, sin, sqrt

import numpy as np

cdef double INF = float("inf")


# ---------------------------------------------------------------------------
# clearance fields
# ---------------------------------------------------------------------------

def box_collision(exy, zxy, double dx_max, double dy_max, double kappa):
    """Normalized box clearance between paired points, >= 1 means clear.

    Returns (values (T,), gradients (T, 2)) where gradients are with respect
    to the first argument's coordinates.
    """
    e = np.ascontiguousarray(exy, dtype=np.float64)
    z = np.ascontiguousarray(zxy, dtype=np.float64)
    cdef double[:, ::1] ev = e
    cdef double[:, ::1] zv = z
    cdef Py_ssize_t T = ev.shape[0], t
    vals = np.empty(T)
    grads = np.empty((T, 2))
    cdef double[::1] vv = vals
    cdef double[:, ::1] gv = grads
    cdef double dx, dy, bx, by, shift, ex, ey, denom, val, dvx, dvy, sx, sy
    for t in range(T):
        dx = ev[t, 0] - zv[t, 0]
        dy = ev[t, 1] - zv[t, 1]
        bx = fabs(dx) / dx_max
        by = fabs(dy) / dy_max
        shift = kappa * (bx if bx > by else by)
        ex = exp(kappa * bx - shift)
        ey = exp(kappa * by - shift)
        denom = ex + ey
        val = (bx * ex + by * ey) / denom
        dvx = (ex / denom) * (1.0 + kappa * bx - kappa * val)
        dvy = (ey / denom) * (1.0 + kappa * by - kappa * val)
        sx = 1.0 if dx > 0.0 else (-1.0 if dx < 0.0 else 0.0)
        sy = 1.0 if dy > 0.0 else (-1.0 if dy < 0.0 else 0.0)
        vv[t] = val
        gv[t, 0] = dvx * sx / dx_max
        gv[t, 1] = dvy * sy / dy_max
    return vals, grads


def circle_collision(exy, zxy, double radius):
    """Normalized circular clearance ||e - z|| / radius with gradients in e."""
    e = np.ascontiguousarray(exy, dtype=np.float64)
    z = np.ascontiguousarray(zxy, dtype=np.float64)
    cdef double[:, ::1] ev = e
    cdef double[:, ::1] zv = z
    cdef Py_ssize_t T = ev.shape[0], t
    vals = np.empty(T)
    grads = np.empty((T, 2))
    cdef double[::1] vv = vals
    cdef double[:, ::1] gv = grads
    cdef double dx, dy, dist, safe
    for t in range(T):
        dx = ev[t, 0] - zv[t, 0]
        dy = ev[t, 1] - zv[t, 1]
        dist = sqrt(dx * dx + dy * dy)
        vv[t] = dist / radius
        safe = dist if dist > 1e-12 else 1e-12
        gv[t, 0] = dx / (radius * safe)
        gv[t, 1] = dy / (radius * safe)
    return vals, grads


# ---------------------------------------------------------------------------
# smooth minimum
# ---------------------------------------------------------------------------

def smooth_min(values, double tau):
    """-tau*log(sum(exp(-v/tau))) and its gradient (the softmin weights)."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[::1] vv = v
    cdef Py_ssize_t n = vv.shape[0], i
    w = np.empty(n)
    cdef double[::1] wv = w
    cdef double shift = -vv[0] / tau
    cdef double scaled, total = 0.0
    for i in range(1, n):
        scaled = -vv[i] / tau
        if scaled > shift:
            shift = scaled
    for i in range(n):
        wv[i] = exp(-vv[i] / tau - shift)
        total += wv[i]
    cdef double val = -tau * (shift + log(total))
    for i in range(n):
        wv[i] /= total
    return val, w


# ---------------------------------------------------------------------------
# batch linearization
# ---------------------------------------------------------------------------

def vehicle_linearize_batch(xs, us, double dt):
    """Euler-discretized unicycle Jacobians for K (state, input) pairs."""
    x = np.ascontiguousarray(xs, dtype=np.float64)
    u = np.ascontiguousarray(us, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] uv = u
    cdef Py_ssize_t K = xv.shape[0], k, i, j
    A = np.zeros((K, 4, 4))
    B = np.zeros((K, 4, 2))
    C = np.empty((K, 4))
    cdef double[:, :, ::1] Av = A
    cdef double[:, :, ::1] Bv = B
    cdef double[:, ::1] Cv = C
    cdef double v, psi, c, s, ax, bu
    cdef double f[4]
    for k in range(K):
        v = xv[k, 2]
        psi = xv[k, 3]
        c = cos(psi)
        s = sin(psi)
        for i in range(4):
            Av[k, i, i] = 1.0
        Av[k, 0, 2] = dt * c
        Av[k, 0, 3] = -dt * v * s
        Av[k, 1, 2] = dt * s
        Av[k, 1, 3] = dt * v * c
        Bv[k, 2, 0] = dt
        Bv[k, 3, 1] = dt
        f[0] = xv[k, 0] + dt * v * c
        f[1] = xv[k, 1] + dt * v * s
        f[2] = xv[k, 2] + dt * uv[k, 0]
        f[3] = xv[k, 3] + dt * uv[k, 1]
        for i in range(4):
            ax = 0.0
            for j in range(4):
                ax += Av[k, i, j] * xv[k, j]
            bu = 0.0
            for j in range(2):
                bu += Bv[k, i, j] * uv[k, j]
            Cv[k, i] = f[i] - ax - bu
    return A, B, C


def quadruped_linearize_batch(xs, us, double dt):
    """Euler-discretized planar-walk Jacobians for K (state, input) pairs."""
    x = np.ascontiguousarray(xs, dtype=np.float64)
    u = np.ascontiguousarray(us, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] uv = u
    cdef Py_ssize_t K = xv.shape[0], k, i, j
    A = np.zeros((K, 3, 3))
    B = np.zeros((K, 3, 3))
    C = np.empty((K, 3))
    cdef double[:, :, ::1] Av = A
    cdef double[:, :, ::1] Bv = B
    cdef double[:, ::1] Cv = C
    cdef double psi, c, s, vx, vy, ax, bu
    cdef double f[3]
    for k in range(K):
        psi = xv[k, 2]
        c = cos(psi)
        s = sin(psi)
        vx = uv[k, 0]
        vy = uv[k, 1]
        for i in range(3):
            Av[k, i, i] = 1.0
        Av[k, 0, 2] = dt * (-vx * s - vy * c)
        Av[k, 1, 2] = dt * (vx * c - vy * s)
        Bv[k, 0, 0] = dt * c
        Bv[k, 0, 1] = -dt * s
        Bv[k, 1, 0] = dt * s
        Bv[k, 1, 1] = dt * c
        Bv[k, 2, 2] = dt
        f[0] = xv[k, 0] + dt * (vx * c - vy * s)
        f[1] = xv[k, 1] + dt * (vx * s + vy * c)
        f[2] = xv[k, 2] + dt * uv[k, 2]
        for i in range(3):
            ax = 0.0
            for j in range(3):
                ax += Av[k, i, j] * xv[k, j]
            bu = 0.0
            for j in range(3):
                bu += Bv[k, i, j] * uv[k, j]
            Cv[k, i] = f[i] - ax - bu
    return A, B, C


# ---------------------------------------------------------------------------
# second-order cone algebra (vectors laid out as (t, u1..ud-1))
# ---------------------------------------------------------------------------

def soc_residual(u):
    """t - ||u1|| ; positive strictly inside the cone."""
    uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] uv = uu
    cdef Py_ssize_t d = uv.shape[0], i
    cdef double sq = 0.0
    for i in range(1, d):
        sq += uv[i] * uv[i]
    return uv[0] - sqrt(sq)


def soc_mul(u, v):
    """Jordan product u o v."""
    uu = np.ascontiguousarray(u, dtype=np.float64)
    vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[::1] uview = uu
    cdef double[::1] vview = vv
    cdef Py_ssize_t d = uview.shape[0], i
    out = np.empty(d)
    cdef double[::1] ov = out
    cdef double dot = 0.0
    for i in range(d):
        dot += uview[i] * vview[i]
    ov[0] = dot
    for i in range(1, d):
        ov[i] = uview[0] * vview[i] + vview[0] * uview[i]
    return out


def soc_solve_mul(lam, d):
    """Solve lam o x = d via the closed-form arrow-matrix inverse."""
    ll = np.ascontiguousarray(lam, dtype=np.float64)
    dd = np.ascontiguousarray(d, dtype=np.float64)
    cdef double[::1] lv = ll
    cdef double[::1] dv = dd
    cdef Py_ssize_t n = lv.shape[0], i
    cdef double lam0 = lv[0], l11 = 0.0, l1d = 0.0
    for i in range(1, n):
        l11 += lv[i] * lv[i]
        l1d += lv[i] * dv[i]
    cdef double det = lam0 * lam0 - l11
    if det <= 0.0 or lam0 <= 0.0:
        raise FloatingPointError("scaling point left the cone interior")
    out = np.empty(n)
    cdef double[::1] ov = out
    ov[0] = (lam0 * dv[0] - l1d) / det
    for i in range(1, n):
        ov[i] = (dv[i] - ov[0] * lv[i]) / lam0
    return out


cdef void _apply_w(double eta, double[::1] wbar, double[::1] v,
                   double[::1] out) noexcept:
    cdef Py_ssize_t d = wbar.shape[0], i
    cdef double w0 = wbar[0], dot = 0.0, coef
    for i in range(1, d):
        dot += wbar[i] * v[i]
    out[0] = eta * (w0 * v[0] + dot)
    coef = v[0] + dot / (1.0 + w0)
    for i in range(1, d):
        out[i] = eta * (v[i] + coef * wbar[i])


def soc_nt_scaling(s, z):
    """Nesterov-Todd scaling point for one cone block.

    Returns (eta, wbar, lam) with W = eta*H(wbar), lam = W z = W^-T s.
    """
    ss = np.ascontiguousarray(s, dtype=np.float64)
    zz = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[::1] sv = ss
    cdef double[::1] zv = zz
    cdef Py_ssize_t d = sv.shape[0], i
    cdef double rs = sv[0] * sv[0], rz = zv[0] * zv[0]
    for i in range(1, d):
        rs -= sv[i] * sv[i]
        rz -= zv[i] * zv[i]
    if rs <= 0.0 or rz <= 0.0 or sv[0] <= 0.0 or zv[0] <= 0.0:
        raise FloatingPointError("iterate left the cone interior")
    rs = sqrt(rs)
    rz = sqrt(rz)
    cdef double dot = 0.0
    for i in range(d):
        dot += (sv[i] / rs) * (zv[i] / rz)
    cdef double gamma = sqrt((1.0 + dot) / 2.0)
    wbar = np.empty(d)
    cdef double[::1] wv = wbar
    wv[0] = (sv[0] / rs + zv[0] / rz) / (2.0 * gamma)
    for i in range(1, d):
        wv[i] = (sv[i] / rs - zv[i] / rz) / (2.0 * gamma)
    cdef double eta = sqrt(rs / rz)
    lam = np.empty(d)
    cdef double[::1] lv = lam
    _apply_w(eta, wv, zv, lv)
    return float(eta), wbar, lam


def soc_apply_w(double eta, wbar, v):
    """W v with W = eta * H(wbar), H = [[w0, w1'], [w1, I + w1 w1'/(1+w0)]]."""
    ww = np.ascontiguousarray(wbar, dtype=np.float64)
    vv = np.ascontiguousarray(v, dtype=np.float64)
    out = np.empty(ww.shape[0])
    _apply_w(eta, ww, vv, out)
    return out


def soc_apply_winv(double eta, wbar, v):
    """W^-1 v; uses H(wbar)^-1 = H(J wbar) where J flips the vector part sign."""
    ww = np.ascontiguousarray(wbar, dtype=np.float64)
    vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[::1] wv = ww
    cdef double[::1] vview = vv
    cdef Py_ssize_t d = wv.shape[0], i
    out = np.empty(d)
    cdef double[::1] ov = out
    cdef double w0 = wv[0], dot = 0.0, coef
    for i in range(1, d):
        dot += (-wv[i]) * vview[i]
    ov[0] = (w0 * vview[0] + dot) / eta
    coef = vview[0] + dot / (1.0 + w0)
    for i in range(1, d):
        ov[i] = (vview[i] + coef * (-wv[i])) / eta
    return out


def soc_wtw_matrix(double eta, wbar):
    """Dense W'W = eta^2 (2 wbar wbar' - J)."""
    ww = np.ascontiguousarray(wbar, dtype=np.float64)
    cdef double[::1] wv = ww
    cdef Py_ssize_t d = wv.shape[0], i, j
    M = np.empty((d, d))
    cdef double[:, ::1] Mv = M
    cdef double eta2 = eta * eta
    for i in range(d):
        for j in range(d):
            Mv[i, j] = eta2 * (2.0 * wv[i] * wv[j])
    Mv[0, 0] -= eta2
    for i in range(1, d):
        Mv[i, i] += eta2
    return M


def soc_max_step(u, du):
    """sup { a >= 0 : u + a*du in cone }, for u strictly inside; inf -> np.inf."""
    uu = np.ascontiguousarray(u, dtype=np.float64)
    dd = np.ascontiguousarray(du, dtype=np.float64)
    cdef double[::1] uv = uu
    cdef double[::1] dv = dd
    cdef Py_ssize_t n = uv.shape[0], i
    cdef double a = dv[0] * dv[0]
    cdef double b = 2.0 * uv[0] * dv[0]
    cdef double c = uv[0] * uv[0]
    for i in range(1, n):
        a -= dv[i] * dv[i]
        b -= 2.0 * uv[i] * dv[i]
        c -= uv[i] * uv[i]
    if c <= 0.0:
        return 0.0
    cdef double best = INF, disc, sq, q, r1, r2
    if fabs(a) < 1e-300:
        if b < 0.0:
            best = -c / b
    else:
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            sq = sqrt(disc)
            # stable root pair (q/a, c/q): the textbook form loses the small
            # root to cancellation exactly when the iterate grazes the cone
            # boundary, which is where the step size matters most
            q = -0.5 * ((b + sq) if b >= 0.0 else (b - sq))
            r1 = q / a
            r2 = (c / q) if q != 0.0 else INF
            if r1 > 0.0 and r1 < best:
                best = r1
            if r2 > 0.0 and r2 < best:
                best = r2
    # also the t-component must stay nonnegative
    if dv[0] < 0.0:
        r1 = -uv[0] / dv[0]
        if r1 < best:
            best = r1
    return best if best < INF else np.inf


def orthant_max_step(u, du):
    """sup { a >= 0 : u + a*du >= 0 }, for u > 0 elementwise."""
    uu = np.ascontiguousarray(u, dtype=np.float64)
    dd = np.ascontiguousarray(du, dtype=np.float64)
    cdef double[::1] uv = uu
    cdef double[::1] dv = dd
    cdef Py_ssize_t n = uv.shape[0], i
    cdef double best = INF, q
    for i in range(n):
        if dv[i] < 0.0:
            q = -uv[i] / dv[i]
            if q < best:
                best = q
    return best if best < INF else np.inf
