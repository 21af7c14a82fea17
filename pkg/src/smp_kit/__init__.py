"""Weak stochastic maximum principle toolkit for regime-switching diffusions."""

from __future__ import annotations

from .adjoint import (
    AdjointSolution,
    AnsatzCurve,
    AnsatzSolution,
    BsdeSpec,
    DualityExpansion,
    PolynomialBasis,
    adjoint_bsde_spec,
    duality_expansion,
    duality_residual,
    feynman_kac_check,
    linear_source,
    martingale_residuals,
    solve_ansatz_odes,
    solve_bsde_backward,
)
from .chain import (
    CountingRecord,
    GeneratorMatrix,
    RegimePath,
    counting_record,
    simulate_chain,
    simulate_chains,
    transition_probability,
)
from .clarke import (
    ConvexBox,
    IntervalSet,
    PiecewiseSmoothFn,
    generalized_gradient,
    gradient_from_one_sided,
    normal_cone,
    stationarity_test,
)
from .dynamics import (
    ControlSpec,
    PathBundle,
    ProblemSpec,
    estimate_cost,
    lipschitz_probe,
    lipschitz_ratio_probe,
    simulate_forward,
    sup_moment,
    validate_assumptions,
)
from .errors import (
    AdmissibilityError,
    BasisError,
    BlowUpError,
    ConfigurationError,
    ConvergenceError,
    DomainError,
    MembershipError,
    NumericalError,
    ParameterError,
    ShapeError,
    SmpKitError,
)
from .examples import EXAMPLE_IDS, ExampleCase, build_example, run_example
from .hamiltonian import hamiltonian, hamiltonian_u, hamiltonian_x
from .problems import AffineQuadraticProblem
from .smp import (
    HamiltonianSpec,
    StationarityReport,
    SufficiencyReport,
    check_necessary,
    check_sufficient,
    compare_costs,
    summary_table,
)

__version__ = "0.1.0"

__all__ = [
    "AdjointSolution",
    "AdmissibilityError",
    "AffineQuadraticProblem",
    "AnsatzCurve",
    "AnsatzSolution",
    "BasisError",
    "BlowUpError",
    "BsdeSpec",
    "ConfigurationError",
    "ControlSpec",
    "ConvergenceError",
    "ConvexBox",
    "CountingRecord",
    "DomainError",
    "DualityExpansion",
    "EXAMPLE_IDS",
    "ExampleCase",
    "GeneratorMatrix",
    "HamiltonianSpec",
    "IntervalSet",
    "MembershipError",
    "NumericalError",
    "ParameterError",
    "PathBundle",
    "PiecewiseSmoothFn",
    "PolynomialBasis",
    "ProblemSpec",
    "RegimePath",
    "ShapeError",
    "SmpKitError",
    "StationarityReport",
    "SufficiencyReport",
    "adjoint_bsde_spec",
    "build_example",
    "check_necessary",
    "check_sufficient",
    "compare_costs",
    "counting_record",
    "duality_expansion",
    "duality_residual",
    "estimate_cost",
    "feynman_kac_check",
    "generalized_gradient",
    "gradient_from_one_sided",
    "hamiltonian",
    "hamiltonian_u",
    "hamiltonian_x",
    "linear_source",
    "lipschitz_probe",
    "lipschitz_ratio_probe",
    "martingale_residuals",
    "normal_cone",
    "run_example",
    "simulate_chain",
    "simulate_chains",
    "simulate_forward",
    "solve_ansatz_odes",
    "solve_bsde_backward",
    "stationarity_test",
    "summary_table",
    "sup_moment",
    "transition_probability",
    "validate_assumptions",
]
