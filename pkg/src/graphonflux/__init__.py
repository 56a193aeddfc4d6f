"""Kirchhoff-constrained transportation-network energies on graphs and their graphon limits."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    AssumptionViolation,
    DegenerateLengthError,
    GraphInstance,
    GraphonFluxError,
    IncompatibleDataError,
    ModelParams,
    SingularSystemError,
    SourceDensity,
    connectivity_constant,
    map_b_to_c,
    map_c_to_b,
    sources_from_density,
)
from .kirchhoff import solve_kirchhoff  # noqa: E402
from .energy import discrete_energy, energy_gradient, original_energy  # noqa: E402
from .optimizer import brute_force_minimize, gradient_flow_integrate, minimize_discrete  # noqa: E402
from .graphon import Kernel, PixelFunction, lift_matrix, lift_vector, project  # noqa: E402
from .continuum import (  # noqa: E402
    continuum_energy,
    continuum_poisson_solve,
    gamma_limsup_sweep,
    minimizer_sweep,
    semi_discrete_energy,
)
