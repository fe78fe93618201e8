"""Empirical privacy auditing for simulated DP-FedSGD with crafted canaries."""
from ._accel import backend

__version__ = "0.1.0"
__all__ = ["backend", "__version__"]
