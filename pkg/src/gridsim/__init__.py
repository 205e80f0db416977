"""Flow-level discrete-event simulator for data-processing grids."""

from .engine import Claim, SharedResource, SimulationAbort, Simulator
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "Claim", "SharedResource", "SimulationAbort", "Simulator", "__version__"]
