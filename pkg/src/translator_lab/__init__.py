"""Numerical laboratory for translating solitons of mean curvature flow."""

from .grassmann import (
    DimensionError,
    DomainError,
    JordanAngles,
    Subspace,
    h_function,
    jordan_angles,
    pairing_w,
    rigidity_thresholds,
    v_from_graph,
    v_function,
)
from .immersion import (
    GraphPatch,
    gauss_map_energy,
    read_patch,
    second_fundamental_form,
    translator_residual,
    weighted_volume,
    write_patch,
)
from .solver import (
    BoundaryData,
    NonConvergenceError,
    SingularJacobianError,
    SolverConfig,
    bowl_reference,
    convergence_study,
    grim_reaper_reference,
    solve_codim1,
    solve_system,
)
from .diagnostics import DiagnosticsReport, identity_suite, inequality_suite

__version__ = "0.1.0"
