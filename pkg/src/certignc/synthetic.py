"""Synthetic worlds, measurement simulation and the outlier-injection protocol.

Worlds are rings or grids with unit step length; odometry edges join
consecutive poses (the ring-closing edge counts as odometry), loop closures
are sampled among non-adjacent near pairs, and landmark sightings cover
poses within an observation radius.  Injection replaces a uniformly chosen
subset of robust edges with uniformly random measurements at scene scale,
leaving precisions and odometry untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factor_graph import (
    CLASS_ODOMETRY,
    MeasurementEdge,
    Pose,
    Problem,
    pose_landmark_edge,
    relative_pose_edge,
)
from .io_g2o import rotation_from_angle, rotation_from_quaternion


@dataclass(frozen=True)
class GenerationSpec:
    d: int = 2
    n_poses: int = 20
    world: str = "ring"           # ring | grid
    sigma_r: float = 0.01         # rotation noise, rad
    sigma_t: float = 0.05         # translation noise
    loop_prob: float = 0.5        # closure probability per eligible near pair
    loop_radius: float = 2.5      # distance threshold for eligible pairs
    n_landmarks: int = 0
    obs_radius: float = 3.0
    step: float = 1.0

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if self.n_poses < 2:
            raise ValueError("need at least two poses")
        if self.world not in ("ring", "grid"):
            raise ValueError(f"unknown world {self.world!r}")
        if self.sigma_r < 0 or self.sigma_t < 0:
            raise ValueError("noise levels must be nonnegative")
        if not 0 <= self.loop_prob <= 1:
            raise ValueError("loop probability must lie in [0, 1]")


@dataclass
class InjectionReport:
    rate: float
    seed: int
    replaced: list[int] = field(default_factory=list)
    original: dict[int, dict] = field(default_factory=dict)
    corrupted: dict[int, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "seed": self.seed,
            "replaced_edges": list(self.replaced),
            "edges": [
                {"index": k, "original": self.original[k], "corrupted": self.corrupted[k]}
                for k in self.replaced
            ],
        }


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on SO(d): uniform angle for d=2, uniform quaternion for d=3."""
    if d == 2:
        return rotation_from_angle(rng.uniform(-np.pi, np.pi))
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return rotation_from_quaternion(*q)


def _rotation_noise(d: int, sigma_r: float, rng: np.random.Generator) -> np.ndarray:
    """Angle ~ N(0, sigma_r); around a uniform axis for d=3."""
    angle = rng.normal(0.0, sigma_r) if sigma_r > 0 else 0.0
    if d == 2:
        return rotation_from_angle(angle)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _ring_trajectory(spec: GenerationSpec) -> list[Pose]:
    n = spec.n_poses
    radius = n * spec.step / (2 * np.pi)
    poses = []
    for k in range(n):
        phi = 2 * np.pi * k / n
        position = radius * np.array([np.cos(phi), np.sin(phi)])
        heading = phi + np.pi / 2  # tangent
        if spec.d == 2:
            poses.append(Pose(rotation_from_angle(heading), position))
        else:
            R = np.eye(3)
            R[:2, :2] = rotation_from_angle(heading)
            poses.append(Pose(R, np.array([position[0], position[1], 0.0])))
    return poses


def _grid_trajectory(spec: GenerationSpec) -> list[Pose]:
    n = spec.n_poses
    side = int(np.ceil(np.sqrt(n)))
    poses = []
    for k in range(n):
        row, col = divmod(k, side)
        x = col if row % 2 == 0 else side - 1 - col  # serpentine sweep
        position = spec.step * np.array([float(x), float(row)])
        heading = 0.0 if row % 2 == 0 else np.pi
        if k + 1 < n and (k + 1) // side != row:
            heading = np.pi / 2  # turning rows happens at row ends; keep simple
        if spec.d == 2:
            poses.append(Pose(rotation_from_angle(heading), position))
        else:
            R = np.eye(3)
            R[:2, :2] = rotation_from_angle(heading)
            poses.append(Pose(R, np.array([position[0], position[1], 0.0])))
    return poses


def _relative_measurement(pa: Pose, pb: Pose, spec: GenerationSpec,
                          rng: np.random.Generator):
    """Noisy relative transform a -> b in a's frame."""
    R_rel = pa.R.T @ pb.R
    t_rel = pa.R.T @ (pb.t - pa.t)
    R_meas = R_rel @ _rotation_noise(spec.d, spec.sigma_r, rng)
    t_meas = t_rel + (rng.normal(0.0, spec.sigma_t, spec.d) if spec.sigma_t > 0
                      else np.zeros(spec.d))
    return R_meas, t_meas


def generate_synthetic(spec: GenerationSpec, seed) -> Problem:
    """Build a ground-truth world and simulate noisy measurements.

    Precisions are kappa = 1/sigma_r^2 and tau = 1/sigma_t^2.
    """
    rng = np.random.default_rng(seed)
    trajectory = _ring_trajectory(spec) if spec.world == "ring" else _grid_trajectory(spec)
    poses = {k: trajectory[k] for k in range(spec.n_poses)}
    # zero-noise worlds get a finite precision floor (sigma 0.1 equivalent)
    kappa = 1.0 / spec.sigma_r ** 2 if spec.sigma_r > 0 else 1e2
    tau = 1.0 / spec.sigma_t ** 2 if spec.sigma_t > 0 else 1e2

    edges: list[MeasurementEdge] = []
    for k in range(spec.n_poses - 1):
        R, t = _relative_measurement(poses[k], poses[k + 1], spec, rng)
        edges.append(relative_pose_edge(k, k + 1, R, t, kappa, tau))
    if spec.world == "ring":
        # closing edge is part of the odometry sweep
        R, t = _relative_measurement(poses[spec.n_poses - 1], poses[0], spec, rng)
        edges.append(relative_pose_edge(spec.n_poses - 1, 0, R, t, kappa, tau,
                                        edge_class=CLASS_ODOMETRY, robust=False))

    positions = np.array([poses[k].t for k in range(spec.n_poses)])
    for a in range(spec.n_poses):
        for b in range(a + 2, spec.n_poses):
            if spec.world == "ring" and a == 0 and b == spec.n_poses - 1:
                continue  # adjacent through the closing edge
            if np.linalg.norm(positions[a] - positions[b]) > spec.loop_radius:
                continue
            if rng.uniform() >= spec.loop_prob:
                continue
            R, t = _relative_measurement(poses[a], poses[b], spec, rng)
            edges.append(relative_pose_edge(a, b, R, t, kappa, tau))

    landmarks: dict[int, np.ndarray] = {}
    if spec.n_landmarks:
        lo = positions.min(axis=0) - spec.step
        hi = positions.max(axis=0) + spec.step
        for k in range(spec.n_landmarks):
            landmarks[k] = rng.uniform(lo, hi)
        for i in range(spec.n_poses):
            for k, lm in landmarks.items():
                if np.linalg.norm(lm - poses[i].t) > spec.obs_radius:
                    continue
                offset = poses[i].R.T @ (lm - poses[i].t)
                noise = (rng.normal(0.0, spec.sigma_t, spec.d) if spec.sigma_t > 0
                         else np.zeros(spec.d))
                edges.append(pose_landmark_edge(i, k, offset + noise, tau))
        # every landmark needs at least one sighting to be estimable
        seen = {e.j for e in edges if e.kind == "pose_landmark"}
        for k in sorted(set(landmarks) - seen):
            i = int(np.argmin(np.linalg.norm(positions - landmarks[k], axis=1)))
            offset = poses[i].R.T @ (landmarks[k] - poses[i].t)
            noise = (rng.normal(0.0, spec.sigma_t, spec.d) if spec.sigma_t > 0
                     else np.zeros(spec.d))
            edges.append(pose_landmark_edge(i, k, offset + noise, tau))

    name = f"{spec.world}-{spec.n_poses}"
    return Problem(d=spec.d, poses=poses, landmarks=landmarks, edges=edges, name=name)


def _edge_payload(e: MeasurementEdge) -> dict:
    payload = {"translation": [float(x) for x in e.translation]}
    if e.rotation is not None:
        payload["rotation"] = [[float(x) for x in row] for row in e.rotation]
    return payload


def inject_outliers(problem: Problem, rate: float, seed) -> tuple[Problem, InjectionReport]:
    """Replace floor(rate * L + 1/2) robust edges with random measurements.

    Rotations are uniform on SO(d); translations and landmark offsets are
    uniform in the ball of radius equal to the scene scale.  Odometry is
    never touched and precisions are preserved.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate {rate} outside [0, 1]")
    seed = int(seed)
    rng = np.random.default_rng(seed)
    eligible = problem.robust_edge_indices
    count = int(np.floor(rate * len(eligible) + 0.5))
    report = InjectionReport(rate=rate, seed=seed)
    if count == 0:
        return problem, report

    chosen = sorted(rng.choice(len(eligible), size=count, replace=False).tolist())
    scale = problem.scene_scale()
    edges = list(problem.edges)
    for c in chosen:
        idx = eligible[c]
        e = edges[idx]
        direction = rng.standard_normal(problem.d)
        direction /= np.linalg.norm(direction)
        radius = scale * rng.uniform() ** (1.0 / problem.d)
        t_new = radius * direction
        if e.kind == "relative_pose":
            new_edge = relative_pose_edge(e.i, e.j, random_rotation(problem.d, rng),
                                          t_new, e.kappa, e.tau,
                                          edge_class=e.edge_class, robust=e.robust)
        else:
            new_edge = pose_landmark_edge(e.i, e.j, t_new, e.tau, robust=e.robust)
        report.replaced.append(idx)
        report.original[idx] = _edge_payload(e)
        report.corrupted[idx] = _edge_payload(new_edge)
        edges[idx] = new_edge

    corrupted = Problem(d=problem.d, poses=dict(problem.poses),
                        landmarks=dict(problem.landmarks), edges=edges,
                        name=problem.name, info_isotropized=problem.info_isotropized)
    return corrupted, report
