"""Factor-graph problem model and its lifted quadratic form.

A Problem holds poses, landmarks and measurement edges.  Lifting replaces
each variable by its rank-p counterpart; every edge becomes one quadratic
factor whose value is

    relative pose:  kappa * ||Yj_rot - Rt^T Yi_rot||_F^2
                    + tau * ||yj_t - yi_t - t^T Yi_rot||^2
    pose-landmark:  tau * ||yk_l - yi_t - l^T Yi_rot||^2

in the row-block convention (rotation blocks are R^T at rank d).  The summed
weighted factor values equal <Q(w), Y Y^T> for the sparse symmetric data
matrix assembled here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .manifolds import BlockLayout, Estimate, ProductPoint, TangentVector, tangent_project

RELATIVE_POSE = "relative_pose"
POSE_LANDMARK = "pose_landmark"

CLASS_ODOMETRY = "odometry"
CLASS_LOOP_CLOSURE = "loop_closure"
CLASS_POSE_LANDMARK = "pose_landmark"

ROTATION_TOL = 1e-9


@dataclass(frozen=True)
class MeasurementEdge:
    """One measurement: a relative pose (i -> j) or a pose-landmark sight."""

    kind: str
    i: int
    j: int
    rotation: np.ndarray | None  # measured relative rotation, relative_pose only
    translation: np.ndarray      # measured relative translation / landmark offset
    kappa: float                 # rotation precision (relative_pose only)
    tau: float                   # translation precision
    edge_class: str
    robust: bool
    # orientation scalars exactly as parsed (angle or quaternion), so that
    # re-serialization is a bitwise fixed point
    raw_orientation: tuple[float, ...] | None = None

    def __post_init__(self):
        t = np.ascontiguousarray(self.translation, dtype=float).reshape(-1)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.kind == RELATIVE_POSE:
            if self.kappa <= 0:
                raise ValueError(f"kappa must be positive, got {self.kappa}")
            R = np.ascontiguousarray(self.rotation, dtype=float)
            d = R.shape[0]
            defect = np.linalg.norm(R @ R.T - np.eye(d))
            if defect > ROTATION_TOL or abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
                raise ValueError(f"measured rotation not in SO({d}) (defect {defect:.2e})")
            R.setflags(write=False)
            object.__setattr__(self, "rotation", R)
        elif self.kind == POSE_LANDMARK:
            if self.rotation is not None:
                raise ValueError("pose-landmark edges carry no rotation measurement")
        else:
            raise ValueError(f"unknown edge kind {self.kind!r}")


def relative_pose_edge(i, j, rotation, translation, kappa, tau, edge_class=None,
                       robust=None, raw_orientation=None):
    if edge_class is None:
        edge_class = CLASS_ODOMETRY if j == i + 1 else CLASS_LOOP_CLOSURE
    if robust is None:
        robust = edge_class != CLASS_ODOMETRY
    return MeasurementEdge(RELATIVE_POSE, i, j, rotation, translation, kappa, tau,
                           edge_class, robust, raw_orientation)


def pose_landmark_edge(i, k, offset, tau, robust=True):
    return MeasurementEdge(POSE_LANDMARK, i, k, None, offset, 0.0, tau,
                           CLASS_POSE_LANDMARK, robust)


@dataclass
class Pose:
    R: np.ndarray
    t: np.ndarray
    raw_orientation: tuple[float, ...] | None = None


@dataclass
class Problem:
    """An estimation problem: variables plus measurement edges.

    Pose/landmark values are ground truth for synthetic worlds and initial
    guesses for parsed datasets.
    """

    d: int
    poses: dict[int, Pose] = field(default_factory=dict)
    landmarks: dict[int, np.ndarray] = field(default_factory=dict)
    edges: list[MeasurementEdge] = field(default_factory=list)
    name: str = ""
    info_isotropized: bool = False

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        for e in self.edges:
            self._check_edge(e)

    def _check_edge(self, e: MeasurementEdge) -> None:
        if e.i not in self.poses:
            raise ValueError(f"edge references unknown pose {e.i}")
        if e.kind == RELATIVE_POSE and e.j not in self.poses:
            raise ValueError(f"edge references unknown pose {e.j}")
        if e.kind == POSE_LANDMARK and e.j not in self.landmarks:
            raise ValueError(f"edge references unknown landmark {e.j}")

    @property
    def robust_edge_indices(self) -> list[int]:
        return [k for k, e in enumerate(self.edges) if e.robust]

    def layout(self) -> BlockLayout:
        return BlockLayout(self.d, tuple(self.poses), tuple(self.landmarks))

    def ground_truth_estimate(self) -> Estimate:
        est = Estimate(d=self.d)
        for i, pose in self.poses.items():
            est.rotations[i] = np.array(pose.R)
            est.translations[i] = np.array(pose.t)
        for k, v in self.landmarks.items():
            est.landmarks[k] = np.array(v)
        return est

    def scene_scale(self) -> float:
        """Max pairwise distance between pose positions; falls back to the
        largest measured translation norm when positions are unavailable."""
        pts = [p.t for p in self.poses.values() if p.t is not None]
        if len(pts) >= 2:
            P = np.asarray(pts)
            diff = P[:, np.newaxis, :] - P[np.newaxis, :, :]
            return float(np.sqrt((diff ** 2).sum(-1)).max())
        norms = [float(np.linalg.norm(e.translation)) for e in self.edges]
        return max(norms) if norms else 1.0


@dataclass(frozen=True)
class SparseDataMatrix:
    """Symmetric objective matrix Q(w) with <Q, Y Y^T> = weighted cost."""

    n: int
    upper_rows: np.ndarray
    upper_cols: np.ndarray
    upper_vals: np.ndarray
    layout: BlockLayout

    @property
    def matrix(self) -> sp.csr_matrix:
        if not hasattr(self, "_csr"):
            coo = sp.coo_matrix(
                (self.upper_vals, (self.upper_rows, self.upper_cols)),
                shape=(self.n, self.n),
            ).tocsr()
            off = sp.triu(coo, k=1)
            full = coo + off.T
            object.__setattr__(self, "_csr", full.tocsr())
        return self._csr

    def matvec(self, Y: np.ndarray) -> np.ndarray:
        return self.matrix @ Y

    def quadratic_form(self, Y: np.ndarray) -> float:
        return float(np.sum(Y * (self.matrix @ Y)))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def diagonal_pose_blocks(self) -> tuple[np.ndarray, np.ndarray]:
        """(stacked d x d rotation diagonal blocks, diagonal of Euclidean rows)."""
        d = self.layout.d
        n_pose = len(self.layout.pose_ids)
        blocks = np.zeros((n_pose, d, d))
        r, c, v = self.upper_rows, self.upper_cols, self.upper_vals
        pose_region = (d + 1) * n_pose
        mask = (
            (r < pose_region) & (c < pose_region)
            & (r // (d + 1) == c // (d + 1))
            & (r % (d + 1) < d) & (c % (d + 1) < d)
        )
        br, lr, lc, bv = r[mask] // (d + 1), r[mask] % (d + 1), c[mask] % (d + 1), v[mask]
        np.add.at(blocks, (br, lr, lc), bv)
        off = lr != lc
        np.add.at(blocks, (br[off], lc[off], lr[off]), bv[off])
        diag = self.matrix.diagonal()[self.layout.euclidean_rows()]
        return blocks, diag

    def mean_abs_diagonal(self) -> float:
        return float(np.mean(np.abs(self.matrix.diagonal())))


@dataclass(frozen=True)
class LiftedGraph:
    """Rank-p lift of a Problem: factors mirror edges one to one.

    Weights multiply whole robust factors; non-robust factors are pinned at
    weight one.  Weight updates produce a new snapshot via with_weights.
    """

    layout: BlockLayout
    p: int
    edges: tuple[MeasurementEdge, ...]
    robust_indices: tuple[int, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=float)
        if w.shape != (len(self.robust_indices),):
            raise ValueError("one weight per robust factor required")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.p < self.layout.d:
            raise ValueError(f"rank {self.p} below dimension {self.layout.d}")

    @property
    def n_factors(self) -> int:
        return len(self.edges)

    def with_weights(self, weights) -> "LiftedGraph":
        return self._share_cache(replace(self, weights=np.asarray(weights, dtype=float)))

    def with_rank(self, p: int) -> "LiftedGraph":
        return self._share_cache(replace(self, p=p))

    def _share_cache(self, other: "LiftedGraph") -> "LiftedGraph":
        for attr in (_CACHE_ATTR, _EDGE_ARRAYS_ATTR):
            cached = getattr(self, attr, None)
            if cached is not None:
                object.__setattr__(other, attr, cached)
        return other

    def factor_weights(self) -> np.ndarray:
        """Per-factor weights in edge order (1 for non-robust factors)."""
        w = np.ones(len(self.edges))
        w[list(self.robust_indices)] = self.weights
        return w


def lift_graph(problem: Problem, p: int) -> LiftedGraph:
    """Construct the rank-p lifted factor graph with unit weights."""
    if p < problem.d:
        raise ValueError(f"rank {p} below dimension {problem.d}")
    layout = problem.layout()
    robust = tuple(problem.robust_edge_indices)
    return LiftedGraph(layout, p, tuple(problem.edges), robust, np.ones(len(robust)))


@dataclass(frozen=True)
class _EdgeArrays:
    """Batched gather indices and measurement stacks for fast evaluation."""

    rp_idx: np.ndarray       # edge indices of relative-pose factors
    rp_rot_i: np.ndarray     # (m, d) rotation row indices of pose i
    rp_rot_j: np.ndarray
    rp_tra_i: np.ndarray     # (m,) translation rows
    rp_tra_j: np.ndarray
    rp_R: np.ndarray         # (m, d, d)
    rp_t: np.ndarray         # (m, d)
    rp_kappa: np.ndarray
    rp_tau: np.ndarray
    pl_idx: np.ndarray
    pl_rot_i: np.ndarray
    pl_tra_i: np.ndarray
    pl_lmk: np.ndarray
    pl_l: np.ndarray
    pl_tau: np.ndarray


_EDGE_ARRAYS_ATTR = "_edge_arrays"


def _edge_arrays(g: LiftedGraph) -> _EdgeArrays:
    cached = getattr(g, _EDGE_ARRAYS_ATTR, None)
    if cached is not None:
        return cached
    layout, d = g.layout, g.layout.d
    rp = [(k, e) for k, e in enumerate(g.edges) if e.kind == RELATIVE_POSE]
    pl = [(k, e) for k, e in enumerate(g.edges) if e.kind == POSE_LANDMARK]

    def rot_rows(i):
        s = layout.rotation_rows(i)
        return np.arange(s.start, s.stop)

    arrays = _EdgeArrays(
        rp_idx=np.array([k for k, _ in rp], dtype=int),
        rp_rot_i=np.array([rot_rows(e.i) for _, e in rp], dtype=int).reshape(len(rp), d),
        rp_rot_j=np.array([rot_rows(e.j) for _, e in rp], dtype=int).reshape(len(rp), d),
        rp_tra_i=np.array([layout.translation_row(e.i) for _, e in rp], dtype=int),
        rp_tra_j=np.array([layout.translation_row(e.j) for _, e in rp], dtype=int),
        rp_R=np.array([e.rotation for _, e in rp]).reshape(len(rp), d, d),
        rp_t=np.array([e.translation for _, e in rp]).reshape(len(rp), d),
        rp_kappa=np.array([e.kappa for _, e in rp]),
        rp_tau=np.array([e.tau for _, e in rp]),
        pl_idx=np.array([k for k, _ in pl], dtype=int),
        pl_rot_i=np.array([rot_rows(e.i) for _, e in pl], dtype=int).reshape(len(pl), d),
        pl_tra_i=np.array([layout.translation_row(e.i) for _, e in pl], dtype=int),
        pl_lmk=np.array([layout.landmark_row(e.j) for _, e in pl], dtype=int),
        pl_l=np.array([e.translation for _, e in pl]).reshape(len(pl), d),
        pl_tau=np.array([e.tau for _, e in pl]),
    )
    object.__setattr__(g, _EDGE_ARRAYS_ATTR, arrays)
    return arrays


def _factor_values(g: LiftedGraph, Y: np.ndarray) -> np.ndarray:
    """Unweighted value of every factor at the stacked point Y."""
    a = _edge_arrays(g)
    vals = np.zeros(len(g.edges))
    if len(a.rp_idx):
        Yi = Y[a.rp_rot_i]                      # (m, d, p)
        rot = Y[a.rp_rot_j] - np.einsum("mba,mbp->map", a.rp_R, Yi)
        tra = Y[a.rp_tra_j] - Y[a.rp_tra_i] - np.einsum("ma,map->mp", a.rp_t, Yi)
        vals[a.rp_idx] = (a.rp_kappa * np.sum(rot * rot, axis=(1, 2))
                          + a.rp_tau * np.sum(tra * tra, axis=1))
    if len(a.pl_idx):
        Yi = Y[a.pl_rot_i]
        res = Y[a.pl_lmk] - Y[a.pl_tra_i] - np.einsum("ma,map->mp", a.pl_l, Yi)
        vals[a.pl_idx] = a.pl_tau * np.sum(res * res, axis=1)
    return vals


def evaluate_cost(g: LiftedGraph, Y: ProductPoint) -> float:
    """Weighted factor-value sum at Y (direct per-factor evaluation)."""
    if Y.layout != g.layout or Y.p != g.p:
        raise ValueError("point layout does not match graph")
    return float(np.dot(g.factor_weights(), _factor_values(g, Y.stacked)))


def _factor_coefficients(layout: BlockLayout, e: MeasurementEdge):
    """Sparse row maps whose Gram matrices give this factor's Q_k.

    Returns a list of (weight, cols, coeffs) groups; each group encodes a
    residual map B with `coeffs` stacked as blocks over `cols`, contributing
    weight * B^T B.
    """
    d = layout.d
    groups = []
    if e.kind == RELATIVE_POSE:
        ri = layout.rotation_rows(e.i)
        rj = layout.rotation_rows(e.j)
        # rotation residual: d rows, each row r of (Yj - Rt^T Yi)
        for r in range(d):
            cols = np.concatenate([np.arange(ri.start, ri.stop), [rj.start + r]])
            coeffs = np.concatenate([-e.rotation.T[r], [1.0]])
            groups.append((e.kappa, cols, coeffs))
        # translation residual row
        cols = np.concatenate([np.arange(ri.start, ri.stop),
                               [layout.translation_row(e.i), layout.translation_row(e.j)]])
        coeffs = np.concatenate([-e.translation, [-1.0, 1.0]])
        groups.append((e.tau, cols, coeffs))
    else:
        ri = layout.rotation_rows(e.i)
        cols = np.concatenate([np.arange(ri.start, ri.stop),
                               [layout.translation_row(e.i), layout.landmark_row(e.j)]])
        coeffs = np.concatenate([-e.translation, [-1.0, 1.0]])
        groups.append((e.tau, cols, coeffs))
    return groups


def _factor_quadratic(layout: BlockLayout, e: MeasurementEdge):
    """Upper-triangle COO entries (rows, cols, vals) of this factor's Q_k."""
    rows_out, cols_out, vals_out = [], [], []
    for weight, cols, coeffs in _factor_coefficients(layout, e):
        outer = weight * np.outer(coeffs, coeffs)
        c = np.asarray(cols)
        R, C = np.meshgrid(c, c, indexing="ij")
        keep = R <= C
        rows_out.append(R[keep])
        cols_out.append(C[keep])
        vals_out.append(outer[keep])
    return (np.concatenate(rows_out), np.concatenate(cols_out),
            np.concatenate(vals_out))


@dataclass(frozen=True)
class _QuadraticCache:
    """Precomputed upper-triangle pieces: fixed part plus per-slot robust parts."""

    fixed: tuple[np.ndarray, np.ndarray, np.ndarray]
    robust: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # rows, cols, vals, slot


_CACHE_ATTR = "_quadratic_cache"


def _graph_cache(g: LiftedGraph) -> _QuadraticCache:
    cache = getattr(g, _CACHE_ATTR, None)
    if cache is not None:
        return cache
    slot_of = {edge_idx: s for s, edge_idx in enumerate(g.robust_indices)}
    f_rows, f_cols, f_vals = [], [], []
    r_rows, r_cols, r_vals, r_slot = [], [], [], []
    for k, e in enumerate(g.edges):
        rows, cols, vals = _factor_quadratic(g.layout, e)
        if k in slot_of:
            r_rows.append(rows)
            r_cols.append(cols)
            r_vals.append(vals)
            r_slot.append(np.full(len(rows), slot_of[k], dtype=int))
        else:
            f_rows.append(rows)
            f_cols.append(cols)
            f_vals.append(vals)

    def cat(parts, dtype=float):
        return np.concatenate(parts) if parts else np.empty(0, dtype=dtype)

    cache = _QuadraticCache(
        fixed=(cat(f_rows, int), cat(f_cols, int), cat(f_vals)),
        robust=(cat(r_rows, int), cat(r_cols, int), cat(r_vals), cat(r_slot, int)),
    )
    object.__setattr__(g, _CACHE_ATTR, cache)
    return cache


def assemble_data_matrix(g: LiftedGraph, weights=None) -> SparseDataMatrix:
    """Q(w) = sum_k w_k Q_k as canonical upper-triangle sparse storage."""
    cache = _graph_cache(g)
    w = g.weights if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(g.robust_indices),):
        raise ValueError("one weight per robust factor required")
    fr, fc, fv = cache.fixed
    rr, rc, rv, slot = cache.robust
    rows = np.concatenate([fr, rr])
    cols = np.concatenate([fc, rc])
    vals = np.concatenate([fv, rv * w[slot]])
    n = g.layout.n
    coo = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr().tocoo()
    return SparseDataMatrix(n, coo.row.copy(), coo.col.copy(), coo.data.copy(), g.layout)


def residual_norms(problem: Problem, estimate: Estimate) -> np.ndarray:
    """Whitened residual r_i >= 0 per robust edge, r_i^2 = rank-d factor value."""
    missing = set(problem.poses) - set(estimate.rotations)
    missing |= set(problem.landmarks) - set(estimate.landmarks)
    if missing:
        raise ValueError(f"estimate missing variables {sorted(missing)}")
    vals = []
    for idx in problem.robust_edge_indices:
        e = problem.edges[idx]
        vals.append(edge_residual_squared(e, estimate))
    return np.sqrt(np.asarray(vals))


def edge_residual_squared(e: MeasurementEdge, est: Estimate) -> float:
    """Precision-weighted factor value of one edge at a rank-d estimate."""
    if e.i not in est.rotations:
        raise ValueError(f"estimate missing pose {e.i}")
    Ri, ti = est.rotations[e.i], est.translations[e.i]
    if e.kind == RELATIVE_POSE:
        if e.j not in est.rotations:
            raise ValueError(f"estimate missing pose {e.j}")
        Rj, tj = est.rotations[e.j], est.translations[e.j]
        rot = Rj - Ri @ e.rotation
        tra = tj - ti - Ri @ e.translation
        return e.kappa * float(np.sum(rot * rot)) + e.tau * float(np.dot(tra, tra))
    if e.j not in est.landmarks:
        raise ValueError(f"estimate missing landmark {e.j}")
    res = est.landmarks[e.j] - ti - Ri @ e.translation
    return e.tau * float(np.dot(res, res))


def problem_space_cost(problem: Problem, est: Estimate, weights=None) -> float:
    """Weighted sum of rank-d factor values (weights over robust edges)."""
    robust = problem.robust_edge_indices
    if weights is None:
        w_map = {idx: 1.0 for idx in robust}
    else:
        w_map = dict(zip(robust, np.asarray(weights, dtype=float)))
    total = 0.0
    for k, e in enumerate(problem.edges):
        total += w_map.get(k, 1.0) * edge_residual_squared(e, est)
    return total


def riemannian_gradient(g: LiftedGraph, Y: ProductPoint,
                        Q: SparseDataMatrix | None = None) -> TangentVector:
    """Tangent projection of the Euclidean gradient 2 Q(w) Y."""
    if Q is None:
        Q = assemble_data_matrix(g)
    return tangent_project(Y, 2.0 * Q.matvec(Y.stacked))
