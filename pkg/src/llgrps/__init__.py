"""Coarse-space solver for the Landau-Lifshitz equation with rough coefficients."""

from .mesh import HierMesh, Patch, build_hier_mesh, build_patch
from .coefficient import CoefficientField, constant, ms_trig, mstrig_field, parse_coefficient
from .assembly import (
    AssemblyContext,
    AssemblyError,
    assemble_anisotropy_mass,
    assemble_cross_term,
    assemble_mass,
    assemble_stiffness,
    discrete_effective_field,
    ll_energy,
)
from .basis import (
    BasisSet,
    MeasurementSet,
    build_basis_set,
    build_measurements,
    decay_profile,
    energy_matrix,
    identity_basis,
    load_basis,
    save_basis,
    solve_basis,
)
from .schemes import (
    FineSystemBuilder,
    SchemeConfig,
    SchemeSystem,
    StepSolver,
    assemble_common_B,
    assemble_step,
    unit_length_deviation,
)
from .solver import (
    CoarseState,
    ComponentBases,
    TripleTensorSet,
    interpolate_initial,
    make_component_bases,
    p_grps,
    precompute_tensors,
    run_algorithm1,
    run_algorithm2,
    run_reference,
)
from .harness import StudyConfig, convergence_study, decay_study, fit_rate, relative_error, timing_report

__version__ = "0.1.0"
