import numpy as np
import pytest

from branchmpc.models import QUADRUPED, VEHICLE
from branchmpc.policies import Policy, PolicySet
from branchmpc.prediction import PredictiveModel, SafetySpec


@pytest.fixture
def safety():
    return SafetySpec(dx_max=10.0, dy_max=2.5, y_min=-1.85, y_max=5.55,
                      psi_min=-0.6, psi_max=0.6, kappa=10.0, tau=0.1)


@pytest.fixture
def vehicle_policies():
    return PolicySet(
        policies=(
            Policy(0, "maintain-speed", {"v_nominal": 12.0, "y_target": 0.0}),
            Policy(1, "slow-down", {"decel": 3.0, "v_floor": 2.0, "y_target": 0.0}),
            Policy(2, "lane-change", {"v_nominal": 12.0, "y_target": 3.7}),
        ),
        model=VEHICLE,
        u_min=np.array([-6.0, -0.6]),
        u_max=np.array([4.0, 0.6]),
    )


@pytest.fixture
def quadruped_policies():
    return PolicySet(
        policies=(
            Policy(0, "constant-forward", {"v_nominal": 0.4}),
            Policy(1, "stop"),
        ),
        model=QUADRUPED,
        u_min=np.array([-0.6, -0.4, -1.0]),
        u_max=np.array([0.6, 0.4, 1.0]),
    )
