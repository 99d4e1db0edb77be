"""Neural ODE/SDE classifiers, SDE privacy calibration and accounting, and
membership-inference evaluation at desk scale."""

from . import attacks, autodiff, nets, privacy, solvers
from ._seeding import mix_seed, rng
from .nets import ModelSpec, build_model, forward, replace_final_block
from .solvers import SolverConfig, dopri5_solve, ode_solve, sde_solve, sigma_of

__version__ = "0.1.0"

__all__ = [
    "attacks",
    "autodiff",
    "nets",
    "privacy",
    "solvers",
    "mix_seed",
    "rng",
    "ModelSpec",
    "build_model",
    "forward",
    "replace_final_block",
    "SolverConfig",
    "ode_solve",
    "dopri5_solve",
    "sde_solve",
    "sigma_of",
]
