"""Trajectory evaluation: optimal rigid alignment and RMSE errors.

The estimate is aligned to the ground truth by the closed-form orthogonal
Procrustes solution with determinant correction (rotation only, no scale),
over pose and landmark positions jointly.  Translation RMSE is taken over
all aligned positions, rotation RMSE over the geodesic angles of the aligned
pose rotations, in degrees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .manifolds import Estimate


@dataclass
class AteResult:
    translation_rmse: float
    rotation_rmse_deg: float
    rotation_align: np.ndarray
    translation_align: np.ndarray

    def to_dict(self) -> dict:
        return {
            "translation_rmse": self.translation_rmse,
            "rotation_rmse_deg": self.rotation_rmse_deg,
        }


def geodesic_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Rotation angle of Ra^T Rb, radians."""
    M = Ra.T @ Rb
    d = M.shape[0]
    if d == 2:
        return abs(float(np.arctan2(M[1, 0], M[0, 0])))
    cos_angle = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_angle))


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) in SO(d) x R^d minimizing sum ||R s_i + t - t_i||^2."""
    src_c = source.mean(axis=0)
    tgt_c = target.mean(axis=0)
    H = (source - src_c).T @ (target - tgt_c)
    U, _, Vt = np.linalg.svd(H)
    d = source.shape[1]
    flip = np.eye(d)
    flip[-1, -1] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ flip @ U.T
    t = tgt_c - R @ src_c
    return R, t


def rmse_ate(estimate: Estimate, ground_truth: Estimate) -> AteResult:
    """Gauge-invariant trajectory error between two estimates."""
    if estimate.d != ground_truth.d:
        raise ValueError("dimension mismatch")
    d = estimate.d
    if set(estimate.rotations) != set(ground_truth.rotations):
        raise ValueError("pose id sets differ")
    if set(estimate.landmarks) != set(ground_truth.landmarks):
        raise ValueError("landmark id sets differ")

    pose_ids = sorted(estimate.rotations)
    lmk_ids = sorted(estimate.landmarks)
    src = np.array([estimate.translations[i] for i in pose_ids]
                   + [estimate.landmarks[k] for k in lmk_ids])
    tgt = np.array([ground_truth.translations[i] for i in pose_ids]
                   + [ground_truth.landmarks[k] for k in lmk_ids])
    if len(src) < d + 1:
        raise ValueError(f"need at least {d + 1} points to align")
    if np.linalg.matrix_rank(tgt - tgt.mean(axis=0), tol=1e-12) < 1:
        raise ValueError("degenerate ground truth: all points coincide")

    R_align, t_align = align_rigid(src, tgt)
    aligned = src @ R_align.T + t_align
    translation_rmse = float(np.sqrt(np.mean(np.sum((aligned - tgt) ** 2, axis=1))))

    angles = [geodesic_angle(R_align @ estimate.rotations[i], ground_truth.rotations[i])
              for i in pose_ids]
    rotation_rmse = float(np.degrees(np.sqrt(np.mean(np.square(angles)))))
    return AteResult(translation_rmse, rotation_rmse, R_align, t_align)


def classification_scores(detected: set[int], injected: set[int]) -> tuple[float, float]:
    """(precision, recall) of an outlier classification; empty sets score 1."""
    precision = 1.0 if not detected else len(detected & injected) / len(detected)
    recall = 1.0 if not injected else len(detected & injected) / len(injected)
    return precision, recall
