"""Reference numpy implementations of the numeric kernels.

The compiled backend in ``native.pyx`` mirrors these signatures exactly; tests
assert elementwise agreement between the two.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# clearance fields
# ---------------------------------------------------------------------------

def box_collision(exy: np.ndarray, zxy: np.ndarray, dx_max: float, dy_max: float,
                  kappa: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalized box clearance between paired points, >= 1 means clear.

    Returns (values (T,), gradients (T, 2)) where gradients are with respect
    to the first argument's coordinates.
    """
    delta = exy - zxy
    bx = np.abs(delta[:, 0]) / dx_max
    by = np.abs(delta[:, 1]) / dy_max
    # softmax-weighted combination, computed shift-stable in the exponent
    shift = kappa * np.maximum(bx, by)
    ex = np.exp(kappa * bx - shift)
    ey = np.exp(kappa * by - shift)
    denom = ex + ey
    vals = (bx * ex + by * ey) / denom
    # d(vals)/d(bx) = (ex/denom) * (1 + kappa*bx - kappa*vals)
    dvx = (ex / denom) * (1.0 + kappa * bx - kappa * vals)
    dvy = (ey / denom) * (1.0 + kappa * by - kappa * vals)
    grads = np.empty_like(delta)
    grads[:, 0] = dvx * np.sign(delta[:, 0]) / dx_max
    grads[:, 1] = dvy * np.sign(delta[:, 1]) / dy_max
    return vals, grads


def circle_collision(exy: np.ndarray, zxy: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalized circular clearance ||e - z|| / radius with gradients in e."""
    delta = exy - zxy
    dist = np.sqrt(np.sum(delta * delta, axis=1))
    vals = dist / radius
    safe = np.maximum(dist, 1e-12)
    grads = delta / (radius * safe[:, None])
    return vals, grads


# ---------------------------------------------------------------------------
# smooth minimum
# ---------------------------------------------------------------------------

def smooth_min(values: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """-tau*log(sum(exp(-v/tau))) and its gradient (the softmin weights)."""
    scaled = -values / tau
    shift = np.max(scaled)
    ex = np.exp(scaled - shift)
    total = np.sum(ex)
    val = -tau * (shift + np.log(total))
    return val, ex / total


# ---------------------------------------------------------------------------
# batch linearization
# ---------------------------------------------------------------------------

def vehicle_linearize_batch(xs: np.ndarray, us: np.ndarray, dt: float):
    """Euler-discretized unicycle Jacobians for K (state, input) pairs."""
    K = xs.shape[0]
    v, psi = xs[:, 2], xs[:, 3]
    c, s = np.cos(psi), np.sin(psi)
    A = np.tile(np.eye(4), (K, 1, 1))
    A[:, 0, 2] = dt * c
    A[:, 0, 3] = -dt * v * s
    A[:, 1, 2] = dt * s
    A[:, 1, 3] = dt * v * c
    B = np.zeros((K, 4, 2))
    B[:, 2, 0] = dt
    B[:, 3, 1] = dt
    f = xs.copy()
    f[:, 0] += dt * v * c
    f[:, 1] += dt * v * s
    f[:, 2] += dt * us[:, 0]
    f[:, 3] += dt * us[:, 1]
    C = f - np.einsum("kij,kj->ki", A, xs) - np.einsum("kij,kj->ki", B, us)
    return A, B, C


def quadruped_linearize_batch(xs: np.ndarray, us: np.ndarray, dt: float):
    """Euler-discretized planar-walk Jacobians for K (state, input) pairs."""
    K = xs.shape[0]
    psi = xs[:, 2]
    c, s = np.cos(psi), np.sin(psi)
    vx, vy = us[:, 0], us[:, 1]
    A = np.tile(np.eye(3), (K, 1, 1))
    A[:, 0, 2] = dt * (-vx * s - vy * c)
    A[:, 1, 2] = dt * (vx * c - vy * s)
    B = np.zeros((K, 3, 3))
    B[:, 0, 0] = dt * c
    B[:, 0, 1] = -dt * s
    B[:, 1, 0] = dt * s
    B[:, 1, 1] = dt * c
    B[:, 2, 2] = dt
    f = xs.copy()
    f[:, 0] += dt * (vx * c - vy * s)
    f[:, 1] += dt * (vx * s + vy * c)
    f[:, 2] += dt * us[:, 2]
    C = f - np.einsum("kij,kj->ki", A, xs) - np.einsum("kij,kj->ki", B, us)
    return A, B, C


# ---------------------------------------------------------------------------
# second-order cone algebra (vectors laid out as (t, u1..ud-1))
# ---------------------------------------------------------------------------

def soc_residual(u: np.ndarray) -> float:
    """t - ||u1|| ; positive strictly inside the cone."""
    return u[0] - float(np.linalg.norm(u[1:]))


def soc_mul(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Jordan product u o v."""
    out = np.empty_like(u)
    out[0] = u @ v
    out[1:] = u[0] * v[1:] + v[0] * u[1:]
    return out


def soc_solve_mul(lam: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Solve lam o x = d via the closed-form arrow-matrix inverse."""
    lam0 = lam[0]
    lam1 = lam[1:]
    det = lam0 * lam0 - lam1 @ lam1
    if det <= 0.0 or lam0 <= 0.0:
        raise FloatingPointError("scaling point left the cone interior")
    x = np.empty_like(d)
    x[0] = (lam0 * d[0] - lam1 @ d[1:]) / det
    x[1:] = (d[1:] - x[0] * lam1) / lam0
    return x


def soc_nt_scaling(s: np.ndarray, z: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Nesterov-Todd scaling point for one cone block.

    Returns (eta, wbar, lam) with W = eta*H(wbar), lam = W z = W^-T s.
    """
    rs = s[0] * s[0] - s[1:] @ s[1:]
    rz = z[0] * z[0] - z[1:] @ z[1:]
    if rs <= 0.0 or rz <= 0.0 or s[0] <= 0.0 or z[0] <= 0.0:
        raise FloatingPointError("iterate left the cone interior")
    rs = np.sqrt(rs)
    rz = np.sqrt(rz)
    sb = s / rs
    zb = z / rz
    gamma = np.sqrt((1.0 + sb @ zb) / 2.0)
    wbar = np.empty_like(s)
    wbar[0] = (sb[0] + zb[0]) / (2.0 * gamma)
    wbar[1:] = (sb[1:] - zb[1:]) / (2.0 * gamma)
    eta = np.sqrt(rs / rz)
    lam = soc_apply_w(eta, wbar, z)
    return float(eta), wbar, lam


def soc_apply_w(eta: float, wbar: np.ndarray, v: np.ndarray) -> np.ndarray:
    """W v with W = eta * H(wbar), H = [[w0, w1'], [w1, I + w1 w1'/(1+w0)]]."""
    w0 = wbar[0]
    w1 = wbar[1:]
    top = w0 * v[0] + w1 @ v[1:]
    bot = v[1:] + (v[0] + (w1 @ v[1:]) / (1.0 + w0)) * w1
    out = np.empty_like(v)
    out[0] = eta * top
    out[1:] = eta * bot
    return out


def soc_apply_winv(eta: float, wbar: np.ndarray, v: np.ndarray) -> np.ndarray:
    """W^-1 v; uses H(wbar)^-1 = H(J wbar) where J flips the vector part sign."""
    w0 = wbar[0]
    w1 = -wbar[1:]
    top = w0 * v[0] + w1 @ v[1:]
    bot = v[1:] + (v[0] + (w1 @ v[1:]) / (1.0 + w0)) * w1
    out = np.empty_like(v)
    out[0] = top / eta
    out[1:] = bot / eta
    return out


def soc_wtw_matrix(eta: float, wbar: np.ndarray) -> np.ndarray:
    """Dense W'W = eta^2 (2 wbar wbar' - J)."""
    d = wbar.shape[0]
    Jdiag = np.full(d, -1.0)
    Jdiag[0] = 1.0
    M = 2.0 * np.outer(wbar, wbar)
    M[np.arange(d), np.arange(d)] -= Jdiag
    return (eta * eta) * M


def soc_max_step(u: np.ndarray, du: np.ndarray) -> float:
    """sup { a >= 0 : u + a*du in cone }, for u strictly inside; inf -> np.inf."""
    a = du[0] * du[0] - du[1:] @ du[1:]
    b = 2.0 * (u[0] * du[0] - u[1:] @ du[1:])
    c = u[0] * u[0] - u[1:] @ u[1:]
    if c <= 0.0:
        return 0.0
    roots = []
    if abs(a) < 1e-300:
        if b < 0.0:
            roots.append(-c / b)
    else:
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            sq = np.sqrt(disc)
            # stable root pair (q/a, c/q): the textbook form loses the small
            # root to cancellation exactly when the iterate grazes the cone
            # boundary, which is where the step size matters most
            q = -0.5 * ((b + sq) if b >= 0.0 else (b - sq))
            for r in ((q / a,) if q == 0.0 else (q / a, c / q)):
                if r > 0.0:
                    roots.append(r)
    # also the t-component must stay nonnegative
    if du[0] < 0.0:
        roots.append(-u[0] / du[0])
    return float(min(roots)) if roots else np.inf


def orthant_max_step(u: np.ndarray, du: np.ndarray) -> float:
    """sup { a >= 0 : u + a*du >= 0 }, for u > 0 elementwise."""
    neg = du < 0.0
    if not np.any(neg):
        return np.inf
    return float(np.min(-u[neg] / du[neg]))
