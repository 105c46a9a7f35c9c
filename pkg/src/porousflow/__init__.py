"""Multiphase porous-media flow with two interchangeable solvers.

A variational solver performing implicit Wasserstein (minimizing movement)
steps through augmented-Lagrangian saddle-point iterations, and an
upstream-mobility finite-volume scheme solved by damped Newton, plus
diagnostics verifying the structural estimates both schemes satisfy.
"""

from .mesh import (FVMesh, SpatialGrid, SpaceTimeMesh, build_cartesian_fv_mesh,
                   build_spatial_grid, build_space_time_mesh, validate_mesh,
                   read_fv_mesh, write_fv_mesh)
from .physics import (PhaseSet, ExternalPotential, BrooksCorey, LinearTwoPhase,
                      QuadraticThreePhase, gravity_potential, capillary_pressure,
                      capillary_potential, total_energy, total_entropy,
                      prox_energy_brooks_corey, prox_energy_quadratic3,
                      prox_conjugate_via_moreau)

__all__ = [
    "FVMesh", "SpatialGrid", "SpaceTimeMesh", "build_cartesian_fv_mesh",
    "build_spatial_grid", "build_space_time_mesh", "validate_mesh",
    "read_fv_mesh", "write_fv_mesh",
    "PhaseSet", "ExternalPotential", "BrooksCorey", "LinearTwoPhase",
    "QuadraticThreePhase", "gravity_potential", "capillary_pressure",
    "capillary_potential", "total_energy", "total_entropy",
    "prox_energy_brooks_corey", "prox_energy_quadratic3",
    "prox_conjugate_via_moreau",
]
