"""BDF-q time stepping for 2D incompressible Navier-Stokes with Taylor-Hood elements."""

from .bdf import (
    BdfScheme,
    bdf_coefficients,
    divided_difference,
    gamma_coefficients,
    multiplier_eta,
    scheme,
    sigma_min,
)
from .cases import ManufacturedCase, builtin_cases, get_case
from .controller import ControllerState, adaptive_run, estimate_error, new_step, select_order, tolerance
from .fem import MixedSpace, assemble_linear_operators, build_mixed_space, error_norms
from .harness import ConvergenceTable, robustness_sweep, spatial_convergence, stokes_projection, temporal_convergence
from .mesh import Mesh, channel_mesh, read_mesh, unit_square_mesh, write_mesh
from .restrictions import RestrictionConfig, check_restrictions
from .stepper import SolutionHistory, StepConfig, Stepper, bdf_step, fixed_step_run, initialize_history

__version__ = "0.1.0"
