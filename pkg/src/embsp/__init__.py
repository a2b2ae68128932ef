"""External-memory BSP runtime with direct message delivery."""
from .api import Comm, run
from .config import CostParams, DriverKind, Layout, SimConfig, validate
from .runtime import Runtime, VpFailure

__version__ = "0.1.0"

__all__ = ["Comm", "run", "CostParams", "DriverKind", "Layout", "SimConfig", "validate",
           "Runtime", "VpFailure", "__version__"]
