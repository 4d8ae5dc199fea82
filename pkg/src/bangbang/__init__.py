"""Optimal bang-bang annealing protocols for Sherrington-Kirkpatrick instances."""

__version__ = "0.1.0"

from .model import SKInstance, CostVector, generate_instance, cost_vector  # noqa: E402
from .statevector import (  # noqa: E402
    BangBangProtocol,
    Protocol,
    StateVector,
    evolve_protocol,
    initial_state,
)

__all__ = [
    "SKInstance", "CostVector", "generate_instance", "cost_vector",
    "BangBangProtocol", "Protocol", "StateVector", "evolve_protocol", "initial_state",
    "__version__",
]
