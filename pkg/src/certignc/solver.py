"""Local optimization of the lifted quadratic cost on the product manifold.

Levenberg-Marquardt-style damped descent: each iteration solves the damped
Gauss-Newton normal equations on the tangent space by preconditioned
conjugate gradients (block-Jacobi preconditioner from the diagonal blocks of
Q), retracts, and accepts only strictly decreasing steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factor_graph import LiftedGraph, SparseDataMatrix, assemble_data_matrix
from .manifolds import ProductPoint, TangentVector, retract, tangent_project

TERMINATION_RELATIVE = "relative_tol"
TERMINATION_ABSOLUTE = "absolute_tol"
TERMINATION_GRADIENT = "gradient_tol"
TERMINATION_MAX_ITERS = "max_iters"

_DAMPING_FLOOR = 1e-12
_DAMPING_CEIL = 1e16


@dataclass(frozen=True)
class SolverConfig:
    relative_cost_tol: float = 1e-8
    absolute_cost_tol: float = 1e-8
    gradient_norm_tol: float | None = None  # None: 1e-8 * (1 + |f0|)
    max_iterations: int = 100
    initial_damping: float = 1e-4
    damping_increase: float = 10.0
    damping_decrease: float = 10.0
    cg_max_iterations: int = 200
    cg_rtol: float = 1e-2

    def __post_init__(self):
        if self.relative_cost_tol <= 0 or self.absolute_cost_tol <= 0:
            raise ValueError("cost tolerances must be positive")
        if self.gradient_norm_tol is not None and self.gradient_norm_tol <= 0:
            raise ValueError("gradient tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    def effective_gradient_tol(self, f0: float) -> float:
        if self.gradient_norm_tol is not None:
            return self.gradient_norm_tol
        return 1e-8 * (1.0 + abs(f0))


@dataclass
class SolveResult:
    point: ProductPoint
    cost: float
    iterations: int
    cost_trace: list[float] = field(default_factory=list)
    termination: str = TERMINATION_MAX_ITERS
    gradient_norm: float = float("nan")


class _BlockJacobi:
    """Blockwise inverse of the diagonal blocks of 2Q + damping * I."""

    def __init__(self, Q: SparseDataMatrix, damping: float):
        layout = Q.layout
        d = layout.d
        blocks, diag = Q.diagonal_pose_blocks()
        eye = np.eye(d)[np.newaxis, :, :]
        self._block_inv = np.linalg.inv(2.0 * blocks + damping * eye)
        self._row_scale = 1.0 / (2.0 * diag + damping)
        self._rot_rows = (layout.rotation_row_starts()[:, np.newaxis]
                          + np.arange(d)[np.newaxis, :])
        self._euc_rows = layout.euclidean_rows()

    def apply(self, R: np.ndarray) -> np.ndarray:
        out = np.empty_like(R)
        out[self._rot_rows] = np.einsum("kab,kbp->kap", self._block_inv, R[self._rot_rows])
        out[self._euc_rows] = R[self._euc_rows] * self._row_scale[:, np.newaxis]
        return out


def _project_inplace(Y: ProductPoint, G: np.ndarray) -> np.ndarray:
    return tangent_project(Y, G).stacked


def _solve_damped_step(Q: SparseDataMatrix, Y: ProductPoint, grad: np.ndarray,
                       damping: float, cfg: SolverConfig, rtol: float) -> np.ndarray:
    """PCG on the tangent space for (P 2Q P + damping I) x = -grad."""
    precond = _BlockJacobi(Q, damping)

    def operator(V):
        return _project_inplace(Y, 2.0 * Q.matvec(V)) + damping * V

    x = np.zeros_like(grad)
    r = -grad
    z = _project_inplace(Y, precond.apply(r))
    p = z.copy()
    rz = float(np.sum(r * z))
    r0 = float(np.linalg.norm(r))
    if r0 == 0.0:
        return x
    for _ in range(cfg.cg_max_iterations):
        Ap = operator(p)
        pAp = float(np.sum(p * Ap))
        if pAp <= 0.0:
            # damped Gauss-Newton model is PSD; a nonpositive value means
            # round-off noise, fall back to the current iterate
            break
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        if float(np.linalg.norm(r)) <= rtol * r0:
            break
        z = _project_inplace(Y, precond.apply(r))
        rz_new = float(np.sum(r * z))
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    if not np.any(x):
        # ensure at least a preconditioned gradient step
        x = _project_inplace(Y, precond.apply(-grad))
    return x


def optimize(g: LiftedGraph, Y0: ProductPoint, cfg: SolverConfig | None = None,
             Q: SparseDataMatrix | None = None) -> SolveResult:
    """Minimize <Q(w), Y Y^T> over the product manifold starting from Y0."""
    if cfg is None:
        cfg = SolverConfig()
    if Y0.layout != g.layout or Y0.p != g.p:
        raise ValueError("initial point layout does not match graph")
    if Y0.feasibility_defect() > 1e-8:
        raise ValueError("initial point is infeasible")
    if Q is None:
        Q = assemble_data_matrix(g)

    Y = Y0
    f = Q.quadratic_form(Y.stacked)
    if not np.isfinite(f):
        raise ValueError("non-finite cost at the initial point")
    gtol = cfg.effective_gradient_tol(f)

    result = SolveResult(point=Y, cost=f, iterations=0, cost_trace=[f])
    grad = _project_inplace(Y, 2.0 * Q.matvec(Y.stacked))
    gnorm = float(np.linalg.norm(grad))
    if gnorm <= gtol:
        result.termination = TERMINATION_GRADIENT
        result.gradient_norm = gnorm
        return result

    damping = cfg.initial_damping
    scale = 1.0 + abs(f)
    for it in range(1, cfg.max_iterations + 1):
        result.iterations = it
        rtol = min(cfg.cg_rtol, np.sqrt(gnorm / scale))
        step = _solve_damped_step(Q, Y, grad, damping, cfg, max(rtol, 1e-10))
        Y_new = retract(Y, TangentVector(Y.layout, step), 1.0)
        f_new = Q.quadratic_form(Y_new.stacked)

        if np.isfinite(f_new) and f_new < f:
            delta = f - f_new
            Y, f = Y_new, f_new
            damping = max(damping / cfg.damping_decrease, _DAMPING_FLOOR)
            result.point, result.cost = Y, f
            result.cost_trace.append(f)
            grad = _project_inplace(Y, 2.0 * Q.matvec(Y.stacked))
            gnorm = float(np.linalg.norm(grad))
            if gnorm <= gtol:
                result.termination = TERMINATION_GRADIENT
                break
            if delta <= cfg.absolute_cost_tol:
                result.termination = TERMINATION_ABSOLUTE
                break
            if delta <= cfg.relative_cost_tol * abs(f):
                result.termination = TERMINATION_RELATIVE
                break
        else:
            damping = damping * cfg.damping_increase
            result.cost_trace.append(f)
            if damping > _DAMPING_CEIL:
                result.termination = TERMINATION_MAX_ITERS
                break
    result.gradient_norm = gnorm
    return result
