import numpy as np
import pytest

from branchmpc import policies as pol
from branchmpc.models import VEHICLE
from branchmpc.policies import Policy, PolicySet

DT = 0.1


def test_maintain_speed_at_setpoint_on_center(vehicle_policies):
    z = np.array([0.0, 0.0, 12.0, 0.0])  # nominal speed, zero lateral error
    u = pol.policy_input(vehicle_policies, 0, z, DT)
    assert np.allclose(u, [0.0, 0.0], atol=1e-12)


def test_maintain_speed_accelerates_below_setpoint(vehicle_policies):
    z = np.array([0.0, 0.0, 8.0, 0.0])
    u = pol.policy_input(vehicle_policies, 0, z, DT)
    assert u[0] > 0.0


def test_lane_keeping_steers_back_toward_center(vehicle_policies):
    above = np.array([0.0, 1.0, 12.0, 0.0])
    below = np.array([0.0, -1.0, 12.0, 0.0])
    assert pol.policy_input(vehicle_policies, 0, above, DT)[1] < 0.0
    assert pol.policy_input(vehicle_policies, 0, below, DT)[1] > 0.0


def test_lane_change_zero_steer_on_target_center(vehicle_policies):
    z = np.array([0.0, 3.7, 12.0, 0.0])  # already on the adjacent lane center
    u = pol.policy_input(vehicle_policies, 2, z, DT)
    assert abs(u[1]) < 1e-12


def test_slow_down_matches_scalar_recursion(vehicle_policies):
    # oracle: v_{k+1} = max(floor, v_k - dt*decel), frozen before implementation
    decel, floor = 3.0, 2.0
    v_expected = [9.0]
    for _ in range(40):
        v_expected.append(max(floor, v_expected[-1] - DT * decel))
    z0 = np.array([0.0, 0.0, 9.0, 0.0])
    traj = pol.rollout(vehicle_policies, 1, z0, 40, DT)
    assert np.allclose(traj[:, 2], v_expected, atol=1e-12)
    diffs = np.diff(traj[:, 2])
    assert np.all(diffs <= 1e-12)            # non-increasing
    assert np.all(traj[:, 2] >= floor - 1e-12)  # bounded below by the floor


def test_inputs_clamped_to_box(vehicle_policies):
    z = np.array([0.0, 40.0, 60.0, -3.0])  # absurd state to force saturation
    u = pol.policy_input(vehicle_policies, 0, z, DT)
    assert np.all(u >= vehicle_policies.u_min - 1e-15)
    assert np.all(u <= vehicle_policies.u_max + 1e-15)


def test_rollout_semigroup(vehicle_policies):
    z0 = np.array([3.0, 1.0, 9.0, 0.1])
    full = pol.rollout(vehicle_policies, 2, z0, 10, DT)
    head = pol.rollout(vehicle_policies, 2, z0, 4, DT)
    tail = pol.rollout(vehicle_policies, 2, head[-1], 6, DT)
    assert np.allclose(full[:5], head, atol=1e-12)
    assert np.allclose(full[4:], tail, atol=1e-12)


def test_lane_change_converges_to_adjacent_center(vehicle_policies):
    z0 = np.array([0.0, 0.0, 12.0, 0.0])
    traj = pol.rollout(vehicle_policies, 2, z0, 200, DT)
    assert abs(traj[-1, 1] - 3.7) < 0.05
    assert abs(traj[-1, 3]) < 0.01


def test_quadruped_policies(quadruped_policies):
    z0 = np.array([1.0, 2.0, 0.3])
    fwd = pol.rollout(quadruped_policies, 0, z0, 5, DT)
    stop = pol.rollout(quadruped_policies, 1, z0, 5, DT)
    assert np.allclose(stop, np.tile(z0, (6, 1)))
    step = fwd[1] - fwd[0]
    assert np.allclose(step[:2], 0.4 * DT * np.array([np.cos(0.3), np.sin(0.3)]))


def test_policy_set_validation():
    with pytest.raises(ValueError):
        PolicySet(policies=(Policy(1, "stop"),), model=VEHICLE,
                  u_min=np.zeros(2), u_max=np.ones(2))
    with pytest.raises(ValueError):
        Policy(0, "teleport")


def test_policies_read_only_own_state(vehicle_policies):
    # same z must give the same input regardless of anything else computed before
    z = np.array([5.0, 0.3, 10.0, -0.05])
    u1 = pol.policy_input(vehicle_policies, 0, z, DT)
    pol.rollout(vehicle_policies, 2, np.array([9.0, 1.0, 3.0, 0.2]), 7, DT)
    u2 = pol.policy_input(vehicle_policies, 0, z, DT)
    assert np.array_equal(u1, u2)
