"""Numerical lab for partial blow-up in the SU(3) Toda system on planar domains."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BranchAbortError,
    ConfigurationError,
    EscapedConfigurationError,
    InsufficientDataError,
    MeshError,
    NonConvergenceError,
    OutsideDomainError,
    RegimeError,
    TodaLabError,
)
from .mesh import DomainSpec, Mesh, ScalarField, build_mesh, refine, integrate, interpolate  # noqa: E402
from .green import GreenFunction  # noqa: E402
from .meanfield import MeanFieldProblem, solve_meanfield, nondegeneracy_check  # noqa: E402
from .reduced import ReducedEnergy, find_critical, multistart  # noqa: E402
from .ansatz import build_ansatz, residual_fields, norm_scaling_study  # noqa: E402
from .toda import TodaSystem, TodaState, toda_newton, continuation, energy_J  # noqa: E402

__all__ = [
    "__version__",
    "TodaLabError", "MeshError", "OutsideDomainError", "ConfigurationError", "RegimeError",
    "NonConvergenceError", "EscapedConfigurationError", "InsufficientDataError", "BranchAbortError",
    "DomainSpec", "Mesh", "ScalarField", "build_mesh", "refine", "integrate", "interpolate",
    "GreenFunction", "MeanFieldProblem", "solve_meanfield", "nondegeneracy_check",
    "ReducedEnergy", "find_critical", "multistart",
    "build_ansatz", "residual_fields", "norm_scaling_study",
    "TodaSystem", "TodaState", "toda_newton", "continuation", "energy_J",
]
