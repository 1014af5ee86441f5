"""Port-Hamiltonian neural networks for controlled oscillators.

Learns the dynamics of controlled oscillatory systems with structure
preserving models (PHNN-S, PHNN-JR) and a black-box neural ODE baseline,
trained through either an explicit midpoint step or an energy-consistent
discrete-gradient step, with optional Jacobian regularization.
"""

from . import autodiff, data, experiments, integrators, models, nets, physics, training

__all__ = [
    "autodiff",
    "nets",
    "physics",
    "integrators",
    "models",
    "data",
    "training",
    "experiments",
]

__version__ = "0.1.0"
