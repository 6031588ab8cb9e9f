import importlib

import numpy as np
import pytest

import branchmpc._kernels as kern
from branchmpc._kernels import pure

from helpers import central_difference

rng = np.random.default_rng(53)


def _backends():
    mods = [pure]
    try:
        native = importlib.import_module("branchmpc._kernels.native")
        mods.append(native)
    except ImportError:
        pass
    return mods


def _interior_soc(d, scale=2.0):
    u = rng.normal(scale=scale, size=d)
    u[0] = np.linalg.norm(u[1:]) + rng.uniform(0.5, 2.0)
    return u


@pytest.mark.parametrize("impl", _backends())
def test_nt_scaling_identities(impl):
    for _ in range(50):
        d = int(rng.integers(2, 8))
        s = _interior_soc(d)
        z = _interior_soc(d)
        eta, wbar, lam = impl.soc_nt_scaling(s, z)
        # wbar lives on the unit hyperboloid
        assert abs(wbar[0] ** 2 - wbar[1:] @ wbar[1:] - 1.0) < 1e-9
        # the defining property: W z = W^-T s = lam (W symmetric)
        assert np.allclose(impl.soc_apply_w(eta, wbar, z), lam, atol=1e-9)
        assert np.allclose(impl.soc_apply_winv(eta, wbar, s), lam, atol=1e-9)
        # inverse really inverts
        v = rng.normal(size=d)
        assert np.allclose(impl.soc_apply_winv(eta, wbar, impl.soc_apply_w(eta, wbar, v)), v, atol=1e-9)
        # W'W matrix equals applying W twice
        WtW = impl.soc_wtw_matrix(eta, wbar)
        assert np.allclose(WtW @ v, impl.soc_apply_w(eta, wbar, impl.soc_apply_w(eta, wbar, v)), atol=1e-8)


@pytest.mark.parametrize("impl", _backends())
def test_jordan_algebra(impl):
    for _ in range(30):
        d = int(rng.integers(2, 7))
        lam = _interior_soc(d)
        x = rng.normal(size=d)
        dvec = impl.soc_mul(lam, x)
        assert np.allclose(impl.soc_solve_mul(lam, dvec), x, atol=1e-9)
        e = np.zeros(d)
        e[0] = 1.0
        assert np.allclose(impl.soc_mul(lam, e), lam)


@pytest.mark.parametrize("impl", _backends())
def test_max_step_lands_on_boundary(impl):
    for _ in range(50):
        d = int(rng.integers(2, 7))
        u = _interior_soc(d)
        du = rng.normal(size=d)
        a = impl.soc_max_step(u, du)
        if np.isfinite(a):
            boundary = u + a * du
            assert abs(impl.soc_residual(boundary)) < 1e-7
            inside = u + 0.99 * a * du
            assert impl.soc_residual(inside) > 0.0
        else:
            for t in (1.0, 10.0, 1000.0):
                assert impl.soc_residual(u + t * du) > 0.0


@pytest.mark.parametrize("impl", _backends())
def test_orthant_max_step(impl):
    u = np.array([1.0, 2.0, 3.0])
    assert impl.orthant_max_step(u, np.array([1.0, 1.0, 1.0])) == np.inf
    a = impl.orthant_max_step(u, np.array([-1.0, -4.0, 1.0]))
    assert abs(a - 0.5) < 1e-12


@pytest.mark.parametrize("impl", _backends())
def test_collision_gradients_match_fd(impl):
    for _ in range(20):
        e = rng.normal(scale=10.0, size=(6, 2))
        z = rng.normal(scale=10.0, size=(6, 2))
        _, grads = impl.box_collision(e, z, 8.0, 2.0, 10.0)
        for t in range(6):
            J = central_difference(
                lambda v: impl.box_collision(v[None, :], z[t:t + 1], 8.0, 2.0, 10.0)[0], e[t])
            assert np.abs(J.ravel() - grads[t]).max() < 1e-6 * max(1.0, np.abs(J).max())
        _, cg = impl.circle_collision(e, z, 5.0)
        for t in range(6):
            J = central_difference(
                lambda v: impl.circle_collision(v[None, :], z[t:t + 1], 5.0)[0], e[t])
            assert np.abs(J.ravel() - cg[t]).max() < 1e-6


@pytest.mark.parametrize("impl", _backends())
def test_smooth_min_value_and_weights(impl):
    v = rng.normal(size=12)
    val, w = impl.smooth_min(v, 0.1)
    assert val <= v.min() + 1e-12
    assert v.min() - val <= 0.1 * np.log(v.size) + 1e-12
    assert abs(w.sum() - 1.0) < 1e-12
    J = central_difference(lambda u: np.array([impl.smooth_min(u, 0.1)[0]]), v)
    assert np.abs(J.ravel() - w).max() < 1e-6


@pytest.mark.parametrize("impl", _backends())
def test_linearize_batch_matches_scalar_path(impl):
    from branchmpc import dynamics
    from branchmpc.models import QUADRUPED, VEHICLE
    xs = rng.normal(size=(10, 4))
    us = rng.normal(size=(10, 2))
    A, B, C = impl.vehicle_linearize_batch(xs, us, 0.1)
    for k in range(10):
        lin = dynamics.linearize(xs[k], us[k], 0.1, VEHICLE)
        assert np.allclose(A[k], lin.A, atol=1e-12)
        assert np.allclose(B[k], lin.B, atol=1e-12)
        assert np.allclose(C[k], lin.C, atol=1e-12)
    xq = rng.normal(size=(10, 3))
    uq = rng.normal(size=(10, 3))
    A, B, C = impl.quadruped_linearize_batch(xq, uq, 0.1)
    for k in range(10):
        lin = dynamics.linearize(xq[k], uq[k], 0.1, QUADRUPED)
        assert np.allclose(A[k], lin.A, atol=1e-12)
        assert np.allclose(B[k], lin.B, atol=1e-12)
        assert np.allclose(C[k], lin.C, atol=1e-12)


def test_backend_parity_when_native_available():
    mods = _backends()
    if len(mods) < 2:
        pytest.skip("compiled backend not built")
    pure_mod, native_mod = mods
    e = rng.normal(scale=8.0, size=(16, 2))
    z = rng.normal(scale=8.0, size=(16, 2))
    for fn in ("box_collision",):
        v1, g1 = getattr(pure_mod, fn)(e, z, 8.0, 2.0, 10.0)
        v2, g2 = getattr(native_mod, fn)(e, z, 8.0, 2.0, 10.0)
        assert np.allclose(v1, v2, atol=1e-12)
        assert np.allclose(g1, g2, atol=1e-12)
    v1, g1 = pure_mod.circle_collision(e, z, 5.0)
    v2, g2 = native_mod.circle_collision(e, z, 5.0)
    assert np.allclose(v1, v2, atol=1e-12) and np.allclose(g1, g2, atol=1e-12)
    vals = rng.normal(size=40)
    a1, w1 = pure_mod.smooth_min(vals, 0.1)
    a2, w2 = native_mod.smooth_min(vals, 0.1)
    assert abs(a1 - a2) < 1e-12 and np.allclose(w1, w2, atol=1e-12)
    s = _interior_soc(5)
    zz = _interior_soc(5)
    e1 = pure_mod.soc_nt_scaling(s, zz)
    e2 = native_mod.soc_nt_scaling(s, zz)
    assert abs(e1[0] - e2[0]) < 1e-12
    assert np.allclose(e1[1], e2[1], atol=1e-12)
    assert np.allclose(e1[2], e2[2], atol=1e-12)
    xs = rng.normal(size=(12, 4))
    us = rng.normal(size=(12, 2))
    for m1, m2 in zip(pure_mod.vehicle_linearize_batch(xs, us, 0.1),
                      native_mod.vehicle_linearize_batch(xs, us, 0.1)):
        assert np.allclose(m1, m2, atol=1e-12)


def test_backend_selector_reports_name():
    assert kern.backend_name() in ("pure", "native")
