"""Robust certifiable factor-graph optimization.

Graduated non-convexity over an inner weighted-least-squares solver run as a
low-rank staircase with per-stage global-optimality certificates, for
pose-graph and landmark SLAM problems.
"""

from .certifier import (
    CertificateResult,
    StaircaseConfig,
    StaircaseResult,
    build_certificate,
    certify,
    min_eigenpair,
    recover_multipliers,
    riemannian_staircase,
    saddle_escape,
)
from .factor_graph import (
    LiftedGraph,
    MeasurementEdge,
    Pose,
    Problem,
    SparseDataMatrix,
    assemble_data_matrix,
    evaluate_cost,
    lift_graph,
    residual_norms,
    riemannian_gradient,
)
from .gnc import (
    GncConfig,
    GncResult,
    GncTrace,
    RobustLossConfig,
    c_bar_from_quantile,
    evaluate_br_objective,
    gnc_solve,
    init_mu,
    suboptimality_gap,
    tls_outlier_process,
    tls_weight_update,
    update_mu,
)
from .io_g2o import G2oParseError, parse_g2o, serialize_problem
from .manifolds import (
    BlockLayout,
    Estimate,
    EuclideanRow,
    LiftedStiefelPoint,
    ProductPoint,
    TangentVector,
    lift_estimate,
    lift_point,
    project_to_stiefel,
    random_point,
    retract,
    round_solution,
    tangent_project,
)
from .metrics import AteResult, rmse_ate
from .solver import SolveResult, SolverConfig, optimize
from .synthetic import GenerationSpec, InjectionReport, generate_synthetic, inject_outliers

__version__ = "0.1.0"

__all__ = [
    "AteResult", "BlockLayout", "CertificateResult", "Estimate", "EuclideanRow",
    "G2oParseError", "GenerationSpec", "GncConfig", "GncResult", "GncTrace",
    "InjectionReport", "LiftedGraph", "LiftedStiefelPoint", "MeasurementEdge",
    "Pose", "Problem", "ProductPoint", "RobustLossConfig", "SolveResult",
    "SolverConfig", "SparseDataMatrix", "StaircaseConfig", "StaircaseResult",
    "TangentVector", "assemble_data_matrix", "build_certificate",
    "c_bar_from_quantile", "certify", "evaluate_br_objective", "evaluate_cost",
    "generate_synthetic", "gnc_solve", "init_mu", "inject_outliers",
    "lift_estimate", "lift_graph", "lift_point", "min_eigenpair", "optimize",
    "parse_g2o", "project_to_stiefel", "random_point", "recover_multipliers",
    "residual_norms", "retract", "riemannian_gradient", "riemannian_staircase",
    "rmse_ate", "round_solution", "saddle_escape", "serialize_problem",
    "suboptimality_gap", "tangent_project", "tls_outlier_process",
    "tls_weight_update", "update_mu",
]
