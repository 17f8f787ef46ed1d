"""Global-optimality verification and rank escalation.

At a stationary point of the rank-p lifted problem, blockwise Lagrange
multipliers give a certificate operator S = Q - BlockDiag(Lambda).  If the
smallest eigenvalue of S clears -eta the point is a global optimum of the
semidefinite relaxation and a lower bound on the problem value follows;
otherwise the offending eigenvector opens a strict descent direction one
rank up.  The staircase driver alternates local optimization with this
certify-or-lift step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .factor_graph import LiftedGraph, SparseDataMatrix, assemble_data_matrix
from .manifolds import (
    Estimate,
    ProductPoint,
    TangentVector,
    lift_estimate,
    lift_point,
    retract,
    round_solution,
)
from .solver import SolverConfig, optimize

_ESCAPE_SUFFICIENT_DECREASE = 1e-4
_ESCAPE_MAX_HALVINGS = 60


class EigsolverError(RuntimeError):
    """Lanczos did not converge; carries the best residual reached."""

    def __init__(self, message: str, best_residual: float):
        super().__init__(message)
        self.best_residual = best_residual


class EscalationError(RuntimeError):
    """Saddle-escape line search exhausted its budget."""


@dataclass
class CertificateResult:
    multipliers: dict[int, np.ndarray]  # pose id -> symmetric d x d block
    lambda_min: float
    v_min: np.ndarray
    certified: bool
    stationarity_residual: float
    f_attained: float
    operator_scale: float = 1.0  # Gershgorin bound, the eigensolver's resolution scale
    eigsolver_failed: bool = False


@dataclass(frozen=True)
class StaircaseConfig:
    p0: int | None = None          # None: the problem dimension d
    p_max: int = 30
    eta: float | None = None       # None: 1e-5 * mean(|diag(Q)|)
    eig_tol: float = 1e-9
    eig_max_iterations: int = 600
    eig_seed: int = 0
    polish: bool = True            # rank-d refinement of the rounded estimate
    solver: SolverConfig = field(default_factory=SolverConfig)

    def resolved_p0(self, d: int) -> int:
        p0 = self.p0 if self.p0 is not None else d
        if not d <= p0 <= self.p_max:
            raise ValueError(f"need d <= p0 <= p_max, got d={d}, p0={p0}, p_max={self.p_max}")
        return p0

    def resolved_eta(self, Q: SparseDataMatrix) -> float:
        if self.eta is not None:
            return self.eta
        return 1e-5 * Q.mean_abs_diagonal()


@dataclass
class StageRecord:
    rank: int
    cost: float
    lambda_min: float
    certified: bool


@dataclass
class StaircaseResult:
    estimate: Estimate
    f_sdp: float | None
    f_qcqp: float
    termination_rank: int
    certified: bool
    stages: list[StageRecord]
    point: ProductPoint
    eta: float
    wall_seconds: float = 0.0


def recover_multipliers(Q: SparseDataMatrix, Y: ProductPoint) -> dict[int, np.ndarray]:
    """Closed-form least-squares multiplier per rotation block.

    Lambda_i = Sym((Q Y)_i Y_i^T), exact because the blocks have orthonormal
    rows; Euclidean rows carry no multiplier.
    """
    layout = Y.layout
    QY = Q.matvec(Y.stacked)
    out = {}
    for pose_id in layout.pose_ids:
        rows = layout.rotation_rows(pose_id)
        B = QY[rows] @ Y.stacked[rows].T
        out[pose_id] = 0.5 * (B + B.T)
    return out


class CertificateOperator:
    """Matrix-free S = Q - BlockDiag(Lambda), never densified."""

    def __init__(self, Q: SparseDataMatrix, multipliers: dict[int, np.ndarray]):
        self.Q = Q
        self.layout = Q.layout
        self.multipliers = multipliers
        self.n = Q.n
        d = self.layout.d
        self._rot_rows = (self.layout.rotation_row_starts()[:, np.newaxis]
                          + np.arange(d)[np.newaxis, :])
        self._lam = np.zeros((len(self.layout.pose_ids), d, d))
        for k, pose_id in enumerate(self.layout.pose_ids):
            if pose_id in multipliers:
                self._lam[k] = multipliers[pose_id]

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        squeeze = v.ndim == 1
        V = v[:, np.newaxis] if squeeze else v
        out = self.Q.matvec(V).copy()
        out[self._rot_rows] -= np.einsum("kab,kbp->kap", self._lam, V[self._rot_rows])
        return out[:, 0] if squeeze else out

    def gershgorin_upper_bound(self) -> float:
        """Upper bound on the largest eigenvalue via Gershgorin rows."""
        r, c, v = self.Q.upper_rows, self.Q.upper_cols, self.Q.upper_vals
        diag = np.zeros(self.n)
        offsum = np.zeros(self.n)
        on_diag = r == c
        np.add.at(diag, r[on_diag], v[on_diag])
        off = ~on_diag
        np.add.at(offsum, r[off], np.abs(v[off]))
        np.add.at(offsum, c[off], np.abs(v[off]))
        d = self.layout.d
        for k, start in enumerate(self.layout.rotation_row_starts()):
            lam = self._lam[k]
            for a in range(d):
                diag[start + a] -= lam[a, a]
                offsum[start + a] += np.sum(np.abs(lam[a])) - abs(lam[a, a])
        return float(np.max(diag + offsum))

    def dense(self) -> np.ndarray:
        S = self.Q.dense()
        d = self.layout.d
        for k, start in enumerate(self.layout.rotation_row_starts()):
            S[start:start + d, start:start + d] -= self._lam[k]
        return S


def build_certificate(Q: SparseDataMatrix,
                      multipliers: dict[int, np.ndarray]) -> CertificateOperator:
    return CertificateOperator(Q, multipliers)


def _as_operator(S) -> tuple[int, callable, float]:
    """Normalize an operator-ish argument to (n, matvec, gershgorin bound)."""
    if isinstance(S, CertificateOperator):
        return S.n, S.matvec, S.gershgorin_upper_bound()
    if sp.issparse(S):
        A = S.tocsr()
        diag = A.diagonal()
        absrow = np.abs(A).sum(axis=1).A1 - np.abs(diag)
        return A.shape[0], (lambda v: A @ v), float(np.max(diag + absrow))
    A = np.asarray(S, dtype=float)
    diag = np.diag(A)
    absrow = np.abs(A).sum(axis=1) - np.abs(diag)
    return A.shape[0], (lambda v: A @ v), float(np.max(diag + absrow))


def min_eigenpair(S, tol: float = 1e-9, max_iterations: int = 600,
                  seed: int = 0) -> tuple[float, np.ndarray]:
    """Algebraically smallest eigenpair by shifted Lanczos.

    Runs Lanczos with full reorthogonalization on sigma*I - S, where sigma is
    a Gershgorin upper bound on lambda_max(S), so the target eigenvalue is
    extremal.  Raises EigsolverError if the residual never reaches
    tol * (|sigma| + |lambda|).
    """
    n, matvec, sigma = _as_operator(S)
    if n == 1:
        lam = float(matvec(np.ones(1))[0])
        return lam, np.ones(1)

    def shifted(v):
        return sigma * v - matvec(v)

    rng = np.random.default_rng(seed)
    budget = min(n, max_iterations)
    Qbasis = np.zeros((n, budget))
    alphas = np.zeros(budget)
    betas = np.zeros(budget)

    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    Qbasis[:, 0] = q
    best = (np.inf, 0.0, np.zeros(n))
    k = 0
    while k < budget:
        u = shifted(Qbasis[:, k])
        alphas[k] = float(Qbasis[:, k] @ u)
        u -= Qbasis[:, :k + 1] @ (Qbasis[:, :k + 1].T @ u)
        u -= Qbasis[:, :k + 1] @ (Qbasis[:, :k + 1].T @ u)  # second pass
        beta = float(np.linalg.norm(u))
        m = k + 1

        check_now = (m % 5 == 0) or (m == budget) or (beta < 1e-13)
        if check_now:
            T = np.diag(alphas[:m]) + np.diag(betas[1:m], 1) + np.diag(betas[1:m], -1)
            evals, evecs = np.linalg.eigh(T)
            theta = evals[-1]  # largest of shifted operator
            y = evecs[:, -1]
            v = Qbasis[:, :m] @ y
            v /= np.linalg.norm(v)
            lam = sigma - theta
            resid = float(np.linalg.norm(matvec(v) - lam * v))
            if resid < best[0]:
                best = (resid, lam, v)
            if resid <= tol * (abs(sigma) + abs(lam)):
                return lam, v

        if beta < 1e-13:
            if m >= n:
                break  # full space spanned; final Ritz check below
            # invariant subspace: restart against the converged basis
            fresh = rng.standard_normal(n)
            fresh -= Qbasis[:, :m] @ (Qbasis[:, :m].T @ fresh)
            norm = np.linalg.norm(fresh)
            if norm < 1e-13:
                raise EigsolverError("Lanczos breakdown with no restart vector",
                                     best[0])
            u = fresh / norm
            beta = 0.0
        else:
            u /= beta
        if m < budget:
            betas[m] = beta
            Qbasis[:, m] = u
        k += 1

    resid, lam, v = best
    raise EigsolverError(
        f"Lanczos did not reach residual {tol:.1e} in {budget} iterations "
        f"(best {resid:.3e})", resid)


def certify(Q: SparseDataMatrix, Y: ProductPoint, eta: float,
            eig_tol: float = 1e-9, eig_max_iterations: int = 600,
            eig_seed: int = 0) -> CertificateResult:
    """Verify optimality of a stationary Y; eigsolver failure means uncertified."""
    multipliers = recover_multipliers(Q, Y)
    S = build_certificate(Q, multipliers)
    f_attained = Q.quadratic_form(Y.stacked)
    stationarity = float(np.linalg.norm(S.matvec(Y.stacked)))
    scale = S.gershgorin_upper_bound()
    try:
        lam, v = min_eigenpair(S, tol=eig_tol, max_iterations=eig_max_iterations,
                               seed=eig_seed)
        failed = False
    except EigsolverError:
        lam, v = -np.inf, np.zeros(Y.n)
        failed = True
    certified = (not failed) and lam >= -eta
    return CertificateResult(multipliers, lam, v, certified, stationarity,
                             f_attained, operator_scale=scale,
                             eigsolver_failed=failed)


def saddle_escape(g: LiftedGraph, Y: ProductPoint, v_min: np.ndarray,
                  lambda_min: float,
                  Q: SparseDataMatrix | None = None) -> ProductPoint:
    """Lift Y one rank and descend along the negative-curvature direction.

    The escape direction places v_min in the newly appended column, which is
    tangent at the lifted point; backtracking accepts the first step with
    cost decrease at least c * alpha^2 * |lambda_min|.
    """
    if Q is None:
        Q = assemble_data_matrix(g)
    Y_up = lift_point(Y, Y.p + 1)
    D = np.zeros_like(Y_up.stacked)
    D[:, -1] = v_min
    direction = TangentVector(Y.layout, D)
    f0 = Q.quadratic_form(Y_up.stacked)
    alpha = 1.0
    for _ in range(_ESCAPE_MAX_HALVINGS):
        candidate = retract(Y_up, direction, alpha)
        f_new = Q.quadratic_form(candidate.stacked)
        if f_new <= f0 - _ESCAPE_SUFFICIENT_DECREASE * alpha ** 2 * abs(lambda_min):
            return candidate
        alpha *= 0.5
    raise EscalationError(
        f"no descent after {_ESCAPE_MAX_HALVINGS} halvings (lambda_min {lambda_min:.3e})")


def riemannian_staircase(g: LiftedGraph, Y0: ProductPoint,
                         cfg: StaircaseConfig | None = None) -> StaircaseResult:
    """Certify-or-lift loop over ranks, starting at Y0's rank.

    Returns a rounded rank-d estimate with a relaxation lower bound when a
    stage certifies; aborts with certified=False once the rank would exceed
    p_max (never a silent success).
    """
    if cfg is None:
        cfg = StaircaseConfig()
    t0 = time.perf_counter()
    d = g.layout.d
    if Y0.p < d:
        raise ValueError(f"initial rank {Y0.p} below dimension {d}")

    Q = assemble_data_matrix(g)  # rank independent
    eta = cfg.resolved_eta(Q)
    stages: list[StageRecord] = []
    Y = Y0
    while Y.p <= cfg.p_max:
        res = optimize(g.with_rank(Y.p), Y, cfg.solver, Q=Q)
        Y = res.point
        cert = certify(Q, Y, eta, cfg.eig_tol, cfg.eig_max_iterations, cfg.eig_seed)
        stages.append(StageRecord(Y.p, res.cost, cert.lambda_min, cert.certified))
        if cert.certified:
            est, f_qcqp, f_sdp = _finalize_certified(g, Q, Y, cert, cfg, eta)
            return StaircaseResult(est, f_sdp, f_qcqp, Y.p, True, stages, Y, eta,
                                   time.perf_counter() - t0)
        if cert.eigsolver_failed or Y.p + 1 > cfg.p_max:
            break
        try:
            Y = saddle_escape(g.with_rank(Y.p), Y, cert.v_min, cert.lambda_min, Q=Q)
        except EscalationError:
            break

    est = round_solution(Y)
    if cfg.polish:
        est, _ = _polish_rank_d(g, Q, est, cfg)
    f_qcqp = Q.quadratic_form(lift_estimate(est, g.layout, d).stacked)
    return StaircaseResult(est, None, f_qcqp, Y.p, False, stages, Y, eta,
                           time.perf_counter() - t0)


def _lower_bound(cert: CertificateResult, n: int) -> float:
    """Relaxation bound from the measured certificate slack.

    With an exactly PSD certificate this equals the attained value; a
    residual negativity delta relaxes it by delta * n.  Negativity below the
    eigensolver's floating-point resolution at the operator scale counts as
    zero.
    """
    delta = max(0.0, -cert.lambda_min)
    if delta <= 1e-12 * max(1.0, abs(cert.operator_scale)):
        delta = 0.0
    return cert.f_attained - delta * n


def _polish_rank_d(g: LiftedGraph, Q: SparseDataMatrix, est: Estimate,
                   cfg: StaircaseConfig) -> tuple[Estimate, ProductPoint]:
    # warm start right next to the optimum: drive stationarity down hard so
    # the final certificate is evaluated at a genuinely critical point
    polish_cfg = replace(cfg.solver, initial_damping=1e-10,
                         relative_cost_tol=1e-15, absolute_cost_tol=1e-15,
                         max_iterations=40)
    d = g.layout.d
    Y_round = lift_estimate(est, g.layout, d)
    res = optimize(g.with_rank(d), Y_round, polish_cfg, Q=Q)
    return round_solution(res.point), res.point


def _finalize_certified(g: LiftedGraph, Q: SparseDataMatrix, Y: ProductPoint,
                        cert: CertificateResult, cfg: StaircaseConfig,
                        eta: float) -> tuple[Estimate, float, float]:
    """Round, optionally polish at rank d, and take the best available bound.

    If the polished rank-d point itself certifies, its (tighter) bound wins;
    otherwise the rank-p certificate's bound stands.
    """
    n = g.layout.n
    d = g.layout.d
    est = round_solution(Y)
    f_sdp = _lower_bound(cert, n)
    if not cfg.polish:
        f_qcqp = Q.quadratic_form(lift_estimate(est, g.layout, d).stacked)
        return est, f_qcqp, f_sdp
    est, Y_d = _polish_rank_d(g, Q, est, cfg)
    f_qcqp = Q.quadratic_form(lift_estimate(est, g.layout, d).stacked)
    cert_d = certify(Q, Y_d, eta, cfg.eig_tol, cfg.eig_max_iterations, cfg.eig_seed)
    if cert_d.certified:
        f_sdp = max(f_sdp, _lower_bound(cert_d, n))
    return est, f_qcqp, f_sdp
