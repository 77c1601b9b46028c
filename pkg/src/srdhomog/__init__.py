"""Voxel-image computational homogenization of multiphase elastic media.

The package walks the three complexity axes of image-based micromechanics:
specimen size (subvolume extraction), image resolution (mixture and
majority-wins voxel coarsening) and finite-element discretization (uniform
subdivision plus quadtree/octree adaptive coarsening with hanging nodes),
with homogenized stiffness extraction under kinematic, periodic and static
uniform boundary conditions, isotropy identification, and validated
energy-norm error estimation.
"""

from .coarsening import (CoarseningReport, adaptive_coarsen,
                         coarsen_resolution_majority, coarsen_resolution_mixture)
from .errors import (ErrorReport, RecoveredField, actual_error, effectivity,
                     estimated_error, recover_stresses, relative_error_field)
from .fem import (ElasticityTensor, HillMandelResidual, MacroLoad, MicroSolution,
                  MicroSystem, SolverError, SolverOptions, assemble,
                  element_energies, element_stiffness, energy_norm,
                  hill_mandel_residual, phase_stiffness, solve_micro,
                  solution_energy_norm, tensor_to_voigt, unit_strain_states,
                  voigt_dim, voigt_to_tensor)
from .homog import (BcComparison, HomogenizationResult, IsotropyReport,
                    bc_comparison, homogenize, identify_isotropy_2d,
                    identify_isotropy_3d, voigt_reuss_bounds)
from .mesh import HangingConstraint, Mesh, build_uniform_mesh, count_ndof
from .microstructure import (Phase, PhaseFractions, PhaseTable, VoxelGrid,
                             centered_subvolume, extract_slice,
                             extract_subvolume, generate_synthetic,
                             load_voxel_grid, phase_fractions, save_voxel_grid)
from .naming import CaseName, format_case_name, parse_case_name
from .sweep import (CaseRecord, ConfigError, SweepConfig, emit_tables,
                    load_config, run_sweep)
from .vtkio import write_vtk

__version__ = "0.1.0"
