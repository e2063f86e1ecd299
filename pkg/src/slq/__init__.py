"""Stochastic linear-quadratic control with affine equality/inequality
constraints: Riccati gains, offset BSDE surrogates, dual KKT solve, and
Monte Carlo verification."""

from .bsde import (
    BasisSpec,
    BrownianEnsemble,
    BsdeSolution,
    Infeasible,
    SlaterWitness,
    SurrogatePath,
    feynman_kac_estimate,
    gram_and_invertibility,
    reduce_constraints,
    slater_check,
    solve_bsde_analytic,
    solve_bsde_lsmc,
)
from .config import RunConfig, load_problem, parse_sweep_spec
from .dual import (
    DualQuadratic,
    DualSolution,
    KktResiduals,
    build_dual_quadratic,
    delta,
    dual_value,
    kkt_residuals,
    project_solve,
    solve_dual,
)
from .expressions import Expression, parse_expression
from .model import (
    Constraint,
    EQUALITY,
    INEQUALITY,
    MatrixPath,
    RandomField,
    SlqProblem,
    TimeGrid,
    ValidationReport,
    build_quadratic_constraints,
    build_variance_constraints,
    validate_problem,
)
from .montecarlo import (
    ClosedLoopRun,
    ConstraintEstimate,
    Estimate,
    VerificationReport,
    duality_gap,
    estimate_constraints,
    estimate_cost,
    simulate_closed_loop,
)
from .riccati import RiccatiSolution, check_uniform_positivity, solve_riccati

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "BrownianEnsemble",
    "BsdeSolution",
    "ClosedLoopRun",
    "Constraint",
    "ConstraintEstimate",
    "DualQuadratic",
    "DualSolution",
    "EQUALITY",
    "Estimate",
    "Expression",
    "INEQUALITY",
    "Infeasible",
    "KktResiduals",
    "MatrixPath",
    "RandomField",
    "RiccatiSolution",
    "RunConfig",
    "SlaterWitness",
    "SlqProblem",
    "SurrogatePath",
    "TimeGrid",
    "ValidationReport",
    "VerificationReport",
    "build_dual_quadratic",
    "build_quadratic_constraints",
    "build_variance_constraints",
    "check_uniform_positivity",
    "delta",
    "dual_value",
    "duality_gap",
    "estimate_constraints",
    "estimate_cost",
    "feynman_kac_estimate",
    "gram_and_invertibility",
    "kkt_residuals",
    "load_problem",
    "parse_expression",
    "parse_sweep_spec",
    "project_solve",
    "reduce_constraints",
    "simulate_closed_loop",
    "slater_check",
    "solve_bsde_analytic",
    "solve_bsde_lsmc",
    "solve_dual",
    "solve_riccati",
    "validate_problem",
]
