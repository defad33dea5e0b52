"""Invariant funnel certification for tracked trajectories of nonlinear systems.

The package computes time-indexed ellipsoidal tubes around a reference
trajectory that closed-loop dispersed trajectories provably cannot leave,
using boundary-sampled sum-of-squares feasibility problems, and checks the
result against dispersed Monte Carlo rollouts.
"""

from funnelkit.polynomials import BasisSpec, MultiPoly, NewtonResult, newton_solve
from funnelkit.tvlqr import QuadraticCertificate, ReferenceTrajectory
from funnelkit.sampling import DisturbanceSet, SampleBatch
from funnelkit.solver import Funnel, InitialSet, SolverConfig

__all__ = [
    "BasisSpec",
    "MultiPoly",
    "NewtonResult",
    "newton_solve",
    "QuadraticCertificate",
    "ReferenceTrajectory",
    "DisturbanceSet",
    "SampleBatch",
    "Funnel",
    "InitialSet",
    "SolverConfig",
]

__version__ = "0.1.0"
