"""Jump measures, PDMP and jump-diffusion simulators, an LSMC BSDE solver and
the identification checks that tie the BSDE solution back to its value function.

Submodules:

* ``measures``   random measures, compensators, stochastic integrals, brackets
* ``kernels``    mark kernels (Dirac, discrete, densities, rate-scaled)
* ``processes``  PDMP and jump-diffusion simulation, measure transfer
* ``bsde``       regression solvers for the forward-backward system, oracles
* ``identify``   martingale-null, Z/U identification, orthogonality, brute force
* ``benchmarks`` registry of named scenarios with closed-form value functions
* ``cli``        config-driven experiment runner
"""

from .bsde import BSDEProblem, BSDESolution, Driver, solve_bsde_lsmc, solve_bsde_pdmp
from .measures import CompensatorSpec, MarkedPointMeasure, PredictableField
from .processes import (
    JumpDiffusionModel,
    PDMPModel,
    simulate_jumpdiff_ensemble,
    simulate_pdmp_ensemble,
)

__version__ = "0.1.0"

__all__ = [
    "BSDEProblem",
    "BSDESolution",
    "CompensatorSpec",
    "Driver",
    "JumpDiffusionModel",
    "MarkedPointMeasure",
    "PDMPModel",
    "PredictableField",
    "simulate_jumpdiff_ensemble",
    "simulate_pdmp_ensemble",
    "solve_bsde_lsmc",
    "solve_bsde_pdmp",
]
