"""Branch MPC toolkit: scenario trees, risk-aware trajectory optimization,
closed-loop simulation, and a teleoperation service."""

__version__ = "0.1.0"

from ._kernels import backend_name

__all__ = ["backend_name", "__version__"]
