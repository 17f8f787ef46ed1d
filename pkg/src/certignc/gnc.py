"""Robust M-estimation by graduated non-convexity over truncated least squares.

The truncated-least-squares loss min(r^2, c_bar^2) is approached through a
surrogate family controlled by mu.  Each stage solves a weighted
least-squares problem (certifiably via the staircase, or locally at rank d),
then refreshes the weights from the closed-form minimizer of the
weight-plus-penalty objective, then increases mu.  Weights are soft inlier
indicators; rounding them at one half classifies edges.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .certifier import StaircaseConfig, StaircaseResult, riemannian_staircase
from .factor_graph import (
    LiftedGraph,
    Problem,
    lift_graph,
    problem_space_cost,
    residual_norms,
)
from .manifolds import Estimate, ProductPoint, lift_estimate, random_point, round_solution
from .solver import SolverConfig, optimize

INNER_CERTIFIABLE = "certifiable"
INNER_LOCAL = "local"

TERMINATION_WEIGHTS = "weights_converged"
TERMINATION_COST = "cost_converged"
TERMINATION_MAX_OUTER = "max_iterations"

_MU_ALL_INLIERS = 1e6


@dataclass(frozen=True)
class RobustLossConfig:
    """Truncated least squares with inlier threshold c_bar on the whitened
    residual; truncation acts on r^2 against c_bar^2."""

    c_bar: float
    kind: str = "tls"

    def __post_init__(self):
        if self.c_bar <= 0:
            raise ValueError("c_bar must be positive")
        if self.kind != "tls":
            raise ValueError(f"unsupported robust loss {self.kind!r}")


def c_bar_from_quantile(problem: Problem, quantile: float = 0.99) -> float:
    """Threshold from the chi-square quantile at the residual's degree count.

    Pose edges combine a chordal rotation part and a translation part,
    counted as d(d+1)/2 + d degrees; landmark edges count d.
    """
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie in (0, 1)")
    d = problem.d
    dof_pose = d * (d + 1) // 2 + d
    robust_kinds = {problem.edges[k].kind for k in problem.robust_edge_indices}
    dof = dof_pose if "relative_pose" in robust_kinds else d
    return float(np.sqrt(chi2.ppf(quantile, dof)))


@dataclass(frozen=True)
class GncConfig:
    loss: RobustLossConfig
    gamma: float = 1.4
    mu_min: float = 1e-4
    # weight rounding tolerance; must sit below the uniformly small weights
    # of the first (nearly convex) stage or that stage looks falsely converged
    epsilon: float = 1e-4
    c_tol_outer: float = 1e-6
    c_tol_inner: float = 1e-5
    max_outer_iterations: int = 100
    inner_mode: str = INNER_CERTIFIABLE
    fixed_mu: bool = False          # plain IRLS at constant mu
    single_inner_iteration: bool = True
    max_inner_iterations: int = 25

    def __post_init__(self):
        if self.gamma <= 1:
            raise ValueError("gamma must exceed 1")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 1/2)")
        if self.c_tol_outer <= 0 or self.c_tol_inner <= 0:
            raise ValueError("cost tolerances must be positive")
        if self.inner_mode not in (INNER_CERTIFIABLE, INNER_LOCAL):
            raise ValueError(f"unknown inner mode {self.inner_mode!r}")


@dataclass
class GncIterationRecord:
    iteration: int
    mu: float
    weighted_cost: float
    robust_cost: float
    weights: np.ndarray
    termination_rank: int
    gap: float | None
    gap_is_relative: bool | None
    certified: bool | None
    wall_ms: float


@dataclass
class GncTrace:
    records: list[GncIterationRecord] = field(default_factory=list)

    def append(self, rec: GncIterationRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class GncResult:
    estimate: Estimate
    weights: np.ndarray
    inlier_edges: list[int]
    outlier_edges: list[int]
    trace: GncTrace
    termination: str
    certified_all_stages: bool


class GncInnerSolverError(RuntimeError):
    """Inner solve failed; the partial trace rides along."""

    def __init__(self, message: str, trace: GncTrace):
        super().__init__(message)
        self.trace = trace


def tls_outlier_process(w: float, mu: float, c_bar: float) -> float:
    """Penalty Phi(w) that makes down-weighting costly: mu(1-w)/(mu+w) * c_bar^2."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"weight {w} outside [0, 1]")
    if mu <= 0:
        raise ValueError("mu must be positive")
    return mu * (1.0 - w) / (mu + w) * c_bar ** 2


def tls_weight_update(r_squared, mu: float, c_bar: float):
    """Closed-form minimizer over [0, 1] of w * r^2 + Phi(w).

    Vectorized over r_squared.  Full weight inside the lower band edge
    mu/(mu+1) * c_bar^2, zero beyond (mu+1)/mu * c_bar^2, interpolated by
    c_bar/|r| * sqrt(mu(mu+1)) - mu in between.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    r2 = np.asarray(r_squared, dtype=float)
    if np.any(r2 < 0):
        raise ValueError("squared residuals must be nonnegative")
    lo = mu / (mu + 1.0) * c_bar ** 2
    hi = (mu + 1.0) / mu * c_bar ** 2
    with np.errstate(divide="ignore"):
        interp = c_bar / np.sqrt(r2) * np.sqrt(mu * (mu + 1.0)) - mu
    w = np.clip(interp, 0.0, 1.0)
    w = np.where(r2 <= lo, 1.0, w)
    w = np.where(r2 >= hi, 0.0, w)
    if np.isscalar(r_squared):
        return float(w)
    return w


def evaluate_br_objective(problem: Problem, estimate: Estimate, weights,
                          mu: float, c_bar: float) -> float:
    """Joint weight-and-state objective: weighted residuals plus the outlier
    process over robust edges, plus unweighted non-robust factor cost."""
    w = np.asarray(weights, dtype=float)
    r = residual_norms(problem, estimate)
    penalty = float(sum(tls_outlier_process(wi, mu, c_bar) for wi in w))
    robust_part = float(np.dot(w, r ** 2)) + penalty
    non_robust = problem_space_cost(problem, estimate, weights=np.zeros_like(w))
    return robust_part + non_robust


def robust_cost(problem: Problem, estimate: Estimate, c_bar: float) -> float:
    """Truncated-loss value: sum of min(r^2, c_bar^2) plus non-robust cost."""
    r = residual_norms(problem, estimate)
    w = np.zeros(len(r))
    truncated = float(np.sum(np.minimum(r ** 2, c_bar ** 2)))
    return truncated + problem_space_cost(problem, estimate, weights=w)


def init_mu(residuals, c_bar: float, mu_min: float = 1e-4) -> float:
    """First homotopy value: the surrogate is nearly convex over the observed
    residual range; a large constant when everything is already in band."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise ValueError("residuals must be nonempty")
    r_max_sq = float(np.max(r) ** 2)
    denom = 2.0 * r_max_sq - c_bar ** 2
    if denom > 0:
        return max(mu_min, c_bar ** 2 / denom)
    return _MU_ALL_INLIERS


def update_mu(mu: float, gamma: float) -> float:
    if mu <= 0 or gamma <= 1:
        raise ValueError("need mu > 0 and gamma > 1")
    return gamma * mu


def suboptimality_gap(f_qcqp: float, f_sdp: float) -> tuple[float, bool]:
    """Relative gap (f_qcqp - f_sdp) / f_sdp, or the absolute gap with a
    False flag when f_sdp is too close to zero to divide by."""
    if f_sdp > 1e-12 * (1.0 + abs(f_qcqp)):
        return (f_qcqp - f_sdp) / f_sdp, True
    return f_qcqp - f_sdp, False


def odometry_estimate(problem: Problem) -> Estimate:
    """Compose measurements along the graph from the lowest pose id.

    Odometry edges are walked first; any remaining unreached variable falls
    back to a breadth-first composition over all edges, then to identity.
    """
    d = problem.d
    est = Estimate(d=d)
    if not problem.poses:
        return est
    order = sorted(problem.poses)
    root = order[0]
    est.rotations[root] = np.eye(d)
    est.translations[root] = np.zeros(d)

    adj: dict[int, list[tuple]] = {i: [] for i in problem.poses}
    for e in problem.edges:
        if e.kind != "relative_pose":
            continue
        rank = 0 if e.edge_class == "odometry" else 1
        adj[e.i].append((rank, e.j, e, False))
        adj[e.j].append((rank, e.i, e, True))

    heap = [(0, root)]
    while heap:
        _, i = heapq.heappop(heap)
        Ri, ti = est.rotations[i], est.translations[i]
        for rank, j, e, backward in sorted(adj[i], key=lambda x: x[0]):
            if j in est.rotations:
                continue
            if backward:
                Rj = Ri @ e.rotation.T
                tj = ti - Rj @ e.translation
            else:
                Rj = Ri @ e.rotation
                tj = ti + Ri @ e.translation
            est.rotations[j] = Rj
            est.translations[j] = tj
            heapq.heappush(heap, (rank, j))
    for i in problem.poses:
        if i not in est.rotations:
            est.rotations[i] = np.eye(d)
            est.translations[i] = np.zeros(d)

    for e in problem.edges:
        if e.kind == "pose_landmark" and e.j not in est.landmarks:
            Ri, ti = est.rotations[e.i], est.translations[e.i]
            est.landmarks[e.j] = ti + Ri @ e.translation
    for k in problem.landmarks:
        est.landmarks.setdefault(k, np.zeros(d))
    return est


def initial_point(problem: Problem, init: str, p0: int, seed) -> ProductPoint:
    layout = problem.layout()
    if init == "random":
        return random_point(layout, seed, p=p0)
    if init == "odometry":
        return lift_estimate(odometry_estimate(problem), layout, p0)
    raise ValueError(f"unknown initialization {init!r}")


def _solve_stage(g: LiftedGraph, Y: ProductPoint, cfg: GncConfig,
                 staircase_cfg: StaircaseConfig, solver_cfg: SolverConfig):
    """One weighted inner solve; returns (Y, estimate, record fields)."""
    if cfg.inner_mode == INNER_CERTIFIABLE:
        res: StaircaseResult = riemannian_staircase(g.with_rank(Y.p), Y, staircase_cfg)
        gap, rel = (None, None)
        if res.f_sdp is not None:
            gap, rel = suboptimality_gap(res.f_qcqp, res.f_sdp)
        return (res.point, res.estimate, res.termination_rank, gap, rel,
                res.certified, res.f_qcqp)
    res = optimize(g.with_rank(Y.p), Y, solver_cfg)
    est = round_solution(res.point)
    return res.point, est, Y.p, None, None, None, res.cost


def gnc_solve(problem: Problem, cfg: GncConfig,
              staircase_cfg: StaircaseConfig | None = None,
              solver_cfg: SolverConfig | None = None,
              seed=0, init: str = "odometry") -> GncResult:
    """Graduated non-convexity outer loop around certifiable or local inner
    weighted least-squares solves.

    Terminates when weights are within epsilon of binary, when the weighted
    cost stalls below c_tol_outer, or at the outer iteration cap.
    """
    if staircase_cfg is None:
        staircase_cfg = StaircaseConfig()
    if solver_cfg is None:
        solver_cfg = staircase_cfg.solver
    c_bar = cfg.loss.c_bar
    d = problem.d
    p0 = staircase_cfg.resolved_p0(d) if cfg.inner_mode == INNER_CERTIFIABLE else d

    g = lift_graph(problem, p0)
    robust_count = len(g.robust_indices)
    Y = initial_point(problem, init, p0, seed)
    est0 = round_solution(Y)

    trace = GncTrace()
    weights = np.ones(robust_count)
    if robust_count:
        mu = init_mu(residual_norms(problem, est0), c_bar, cfg.mu_min)
    else:
        mu = _MU_ALL_INLIERS
    termination = TERMINATION_MAX_OUTER
    certified_all = True
    prev_cost = None
    saturated_streak = 0
    estimate = est0

    for it in range(1, cfg.max_outer_iterations + 1):
        t_start = time.perf_counter()
        g = g.with_weights(weights)
        try:
            inner_passes = 1 if cfg.single_inner_iteration else cfg.max_inner_iterations
            inner_prev = None
            for _ in range(inner_passes):
                (Y, estimate, rank, gap, gap_rel, certified,
                 weighted_cost) = _solve_stage(g, Y, cfg, staircase_cfg, solver_cfg)
                if robust_count:
                    r = residual_norms(problem, estimate)
                    weights = tls_weight_update(r ** 2, mu, c_bar)
                    g = g.with_weights(weights)
                if inner_prev is not None and abs(inner_prev - weighted_cost) <= cfg.c_tol_inner:
                    break
                inner_prev = weighted_cost
        except Exception as err:
            raise GncInnerSolverError(str(err), trace) from err

        if certified is False:
            certified_all = False
        wall_ms = (time.perf_counter() - t_start) * 1e3
        trace.append(GncIterationRecord(
            iteration=it, mu=mu, weighted_cost=weighted_cost,
            robust_cost=robust_cost(problem, estimate, c_bar),
            weights=weights.copy(), termination_rank=rank, gap=gap,
            gap_is_relative=gap_rel, certified=certified, wall_ms=wall_ms))

        if robust_count == 0:
            termination = TERMINATION_WEIGHTS
            break
        if float(np.max(np.abs(weights - np.round(weights)))) <= cfg.epsilon:
            termination = TERMINATION_WEIGHTS
            break
        if prev_cost is not None and abs(prev_cost - weighted_cost) <= cfg.c_tol_outer:
            termination = TERMINATION_COST
            break
        prev_cost = weighted_cost

        saturated = bool(np.all((weights == 0.0) | (weights == 1.0)))
        saturated_streak = saturated_streak + 1 if saturated else 0
        if not cfg.fixed_mu and saturated_streak < 2:
            mu = update_mu(mu, cfg.gamma)

    outliers = [g.robust_indices[k] for k in range(robust_count) if weights[k] < 0.5]
    inliers = [g.robust_indices[k] for k in range(robust_count) if weights[k] >= 0.5]
    return GncResult(estimate=estimate, weights=weights, inlier_edges=inliers,
                     outlier_edges=outliers, trace=trace, termination=termination,
                     certified_all_stages=certified_all)
