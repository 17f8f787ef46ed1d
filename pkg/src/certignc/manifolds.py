"""Geometry of the lifted variable domains.

Rotation variables live on a transposed Stiefel manifold (d x p matrices with
orthonormal rows), translations and landmarks on Euclidean rows, and a full
state is their product stacked into a single n x p matrix.  The rank-lifting
and rounding maps between lifted states and problem-space estimates live here
as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FEASIBILITY_TOL = 1e-10


class DegenerateInputError(ValueError):
    """Raised when a matrix is too rank-deficient for a polar projection."""


def _sym(B: np.ndarray) -> np.ndarray:
    return 0.5 * (B + B.T)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LiftedStiefelPoint:
    """A d x p matrix with orthonormal rows (d <= p)."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _readonly(self.matrix))
        d, p = self.matrix.shape
        if d > p:
            raise ValueError(f"row count {d} exceeds rank {p}")
        gram_err = np.linalg.norm(self.matrix @ self.matrix.T - np.eye(d))
        if gram_err > FEASIBILITY_TOL:
            raise ValueError(f"rows not orthonormal (defect {gram_err:.3e})")

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class EuclideanRow:
    """An unconstrained 1 x p row."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vector, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite entries in Euclidean row")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def p(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True)
class BlockLayout:
    """Canonical row layout of the stacked variable.

    Rows are ordered pose by pose (ascending id, d rotation rows then one
    translation row each), followed by landmark rows in ascending id order.
    """

    d: int
    pose_ids: tuple[int, ...]
    landmark_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pose_ids", tuple(sorted(self.pose_ids)))
        object.__setattr__(self, "landmark_ids", tuple(sorted(self.landmark_ids)))
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if len(set(self.pose_ids)) != len(self.pose_ids):
            raise ValueError("duplicate pose ids")
        if len(set(self.landmark_ids)) != len(self.landmark_ids):
            raise ValueError("duplicate landmark ids")

    @property
    def n(self) -> int:
        return (self.d + 1) * len(self.pose_ids) + len(self.landmark_ids)

    def rotation_rows(self, pose_id: int) -> slice:
        k = self.pose_ids.index(pose_id)
        start = (self.d + 1) * k
        return slice(start, start + self.d)

    def translation_row(self, pose_id: int) -> int:
        k = self.pose_ids.index(pose_id)
        return (self.d + 1) * k + self.d

    def landmark_row(self, landmark_id: int) -> int:
        k = self.landmark_ids.index(landmark_id)
        return (self.d + 1) * len(self.pose_ids) + k

    def rotation_row_starts(self) -> np.ndarray:
        """Start row of every rotation block, in canonical order."""
        return np.arange(len(self.pose_ids)) * (self.d + 1)

    def euclidean_rows(self) -> np.ndarray:
        """Indices of all translation and landmark rows."""
        tra = np.arange(len(self.pose_ids)) * (self.d + 1) + self.d
        lmk = (self.d + 1) * len(self.pose_ids) + np.arange(len(self.landmark_ids))
        return np.concatenate([tra, lmk]).astype(int)


def _check_layout_shape(layout: BlockLayout, M: np.ndarray, what: str) -> None:
    if M.ndim != 2 or M.shape[0] != layout.n:
        raise ValueError(f"{what} has shape {M.shape}, expected ({layout.n}, p)")


@dataclass(frozen=True)
class ProductPoint:
    """Stacked rank-p state over the product of all variable manifolds."""

    layout: BlockLayout
    stacked: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "stacked", _readonly(self.stacked))
        _check_layout_shape(self.layout, self.stacked, "stacked point")

    @property
    def p(self) -> int:
        return self.stacked.shape[1]

    @property
    def n(self) -> int:
        return self.stacked.shape[0]

    def rotation_block(self, pose_id: int) -> np.ndarray:
        return self.stacked[self.layout.rotation_rows(pose_id)]

    def blocks(self):
        """Yield (variable key, block) pairs in canonical order."""
        for i in self.layout.pose_ids:
            yield ("rot", i), LiftedStiefelPoint(self.stacked[self.layout.rotation_rows(i)])
            yield ("tra", i), EuclideanRow(self.stacked[self.layout.translation_row(i)])
        for k in self.layout.landmark_ids:
            yield ("lmk", k), EuclideanRow(self.stacked[self.layout.landmark_row(k)])

    def feasibility_defect(self) -> float:
        """Largest Frobenius deviation of any rotation block from orthonormal rows."""
        d = self.layout.d
        worst = 0.0
        for start in self.layout.rotation_row_starts():
            M = self.stacked[start:start + d]
            worst = max(worst, float(np.linalg.norm(M @ M.T - np.eye(d))))
        return worst


@dataclass(frozen=True)
class TangentVector:
    """Tangent direction at a ProductPoint, same stacked layout."""

    layout: BlockLayout
    stacked: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "stacked", _readonly(self.stacked))
        _check_layout_shape(self.layout, self.stacked, "tangent vector")

    @property
    def p(self) -> int:
        return self.stacked.shape[1]

    def norm(self) -> float:
        return float(np.linalg.norm(self.stacked))


@dataclass
class Estimate:
    """Problem-space state: rotations in SO(d), positions in R^d."""

    d: int
    rotations: dict[int, np.ndarray] = field(default_factory=dict)
    translations: dict[int, np.ndarray] = field(default_factory=dict)
    landmarks: dict[int, np.ndarray] = field(default_factory=dict)


def project_to_stiefel(A: np.ndarray) -> np.ndarray:
    """Polar factor of A: the closest matrix with orthonormal rows.

    Raises DegenerateInputError when A is (numerically) row-rank deficient.
    """
    A = np.asarray(A, dtype=float)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[-1] <= max(A.shape) * np.finfo(float).eps * max(s[0], 1.0):
        raise DegenerateInputError(
            f"input is rank deficient (smallest singular value {s[-1]:.3e})"
        )
    return U @ Vt


def tangent_project_block(M: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Project an ambient d x p matrix onto the tangent space at M."""
    return G - _sym(G @ M.T) @ M


def tangent_project(Y: ProductPoint, G: np.ndarray) -> TangentVector:
    """Blockwise tangent projection of an ambient n x p matrix at Y."""
    layout = Y.layout
    _check_layout_shape(layout, G, "ambient matrix")
    V = np.array(G, dtype=float)
    d = layout.d
    for start in layout.rotation_row_starts():
        rows = slice(start, start + d)
        V[rows] = tangent_project_block(Y.stacked[rows], G[rows])
    return TangentVector(layout, V)


def retract(Y: ProductPoint, V: TangentVector, step: float = 1.0) -> ProductPoint:
    """Move from Y along step * V; polar retraction on rotation blocks."""
    if step == 0.0:
        return Y
    layout = Y.layout
    Z = Y.stacked + step * V.stacked
    out = np.array(Z)
    d = layout.d
    for start in layout.rotation_row_starts():
        rows = slice(start, start + d)
        out[rows] = project_to_stiefel(Z[rows])
    return ProductPoint(layout, out)


def lift_point(Y: ProductPoint, p_new: int) -> ProductPoint:
    """Append zero columns to reach rank p_new (p_new >= current rank)."""
    if p_new < Y.p:
        raise ValueError(f"cannot lower rank from {Y.p} to {p_new}")
    if p_new == Y.p:
        return Y
    padded = np.hstack([Y.stacked, np.zeros((Y.n, p_new - Y.p))])
    return ProductPoint(Y.layout, padded)


def random_point(layout: BlockLayout, seed, p: int | None = None) -> ProductPoint:
    """Draw a feasible point: QR-orthonormalized Gaussian rotation blocks
    (sign-fixed so R has positive diagonal), Gaussian Euclidean rows."""
    d = layout.d
    if p is None:
        p = d
    if p < d:
        raise ValueError(f"rank {p} below block dimension {d}")
    rng = np.random.default_rng(seed)
    Y = np.empty((layout.n, p))
    for start in layout.rotation_row_starts():
        A = rng.standard_normal((p, d))
        Q, R = np.linalg.qr(A)
        Q = Q * np.sign(np.diag(R))[np.newaxis, :]
        Y[start:start + d] = Q.T
    for row in layout.euclidean_rows():
        Y[row] = rng.standard_normal(p)
    return ProductPoint(layout, Y)


def _nearest_special_orthogonal(A: np.ndarray) -> np.ndarray:
    """Closest matrix in SO(d); a reflection is fixed by flipping the
    direction of the smallest singular value."""
    U, s, Vt = np.linalg.svd(A)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        flip = np.ones(A.shape[0])
        flip[-1] = -1.0
        R = U @ np.diag(flip) @ Vt
    return R


def round_solution(Y: ProductPoint) -> Estimate:
    """Collapse a rank-p state to a problem-space estimate.

    Truncates Y to its best rank-d approximation, orients the result so a
    majority of rotation blocks land in SO(d) (a single global reflection),
    then projects each rotation block to SO(d).
    """
    layout = Y.layout
    d = layout.d
    U, s, Vt = np.linalg.svd(Y.stacked, full_matrices=False)
    X = U[:, :d] * s[:d][np.newaxis, :]

    dets = []
    for start in layout.rotation_row_starts():
        try:
            B = project_to_stiefel(X[start:start + d])
        except DegenerateInputError:
            B = np.eye(d)
        dets.append(np.linalg.det(B))
    if dets and np.sum(np.asarray(dets) < 0) * 2 > len(dets):
        flip = np.ones(d)
        flip[-1] = -1.0
        X = X @ np.diag(flip)

    est = Estimate(d=d)
    for i in layout.pose_ids:
        block = X[layout.rotation_rows(i)]
        try:
            R = _nearest_special_orthogonal(block)
        except np.linalg.LinAlgError:
            R = np.eye(d)
        # row convention stores R transposed
        est.rotations[i] = R.T
        est.translations[i] = X[layout.translation_row(i)].copy()
    for k in layout.landmark_ids:
        est.landmarks[k] = X[layout.landmark_row(k)].copy()
    return est


def lift_estimate(est: Estimate, layout: BlockLayout, p: int) -> ProductPoint:
    """Embed a problem-space estimate at rank p (zero-padded columns)."""
    d = layout.d
    if p < d:
        raise ValueError(f"rank {p} below dimension {d}")
    Y = np.zeros((layout.n, p))
    for i in layout.pose_ids:
        R = est.rotations[i]
        Y[layout.rotation_rows(i), :d] = R.T
        Y[layout.translation_row(i), :d] = est.translations[i]
    for k in layout.landmark_ids:
        Y[layout.landmark_row(k), :d] = est.landmarks[k]
    return ProductPoint(layout, Y)
