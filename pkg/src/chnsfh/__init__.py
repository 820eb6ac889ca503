"""Staggered-grid solver for Cahn-Hilliard-Navier-Stokes with Flory-Huggins potential."""
from .grid import BcMode, Grid, MacVelocity
from .scheme import CHNSIntegrator, SchemeParams, SimState, SourceTerms, init_history, step

__version__ = "0.1.0"

__all__ = [
    "BcMode", "Grid", "MacVelocity", "CHNSIntegrator", "SchemeParams", "SimState",
    "SourceTerms", "init_history", "step",
]
