"""g2o text ingestion and serialization, plus the ground-truth sidecar table.

Supported grammar (one record per line, `#` comments and blanks skipped):

    VERTEX_SE2 id x y theta
    EDGE_SE2 i j dx dy dtheta I11 I12 I13 I22 I23 I33
    VERTEX_XY id x y
    EDGE_SE2_XY i k lx ly I11 I12 I22
    VERTEX_SE3:QUAT id x y z qx qy qz qw
    EDGE_SE3:QUAT i j dx dy dz qx qy qz qw  <21 upper-triangular info entries>

Information matrices are given as the upper triangle in row-major order and
must be positive definite.  Pose edges with j = i + 1 classify as odometry,
other pose edges as loop closures; pose-landmark edges form their own class.
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
from .manifolds import Estimate

_QUAT_NORM_SLACK = 1e-3
_FLOAT_FMT = "%.17g"
_ISOTROPIZED_NOTE = "# information matrices isotropized to scalar precisions"


class G2oParseError(ValueError):
    """Parse failure located at (line, column), both 1-based."""

    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass
class G2oRecord:
    tag: str
    values: list
    line: int


@dataclass
class G2oDocument:
    """Typed records in file order; dimension inferred from the tags."""

    dimension: int
    records: list[G2oRecord] = field(default_factory=list)
    isotropized_note: bool = False


_TAGS_2D = {"VERTEX_SE2", "EDGE_SE2", "VERTEX_XY", "EDGE_SE2_XY"}
_TAGS_3D = {"VERTEX_SE3:QUAT", "EDGE_SE3:QUAT"}

_ARITY = {
    "VERTEX_SE2": 4,
    "EDGE_SE2": 11,
    "VERTEX_XY": 3,
    "EDGE_SE2_XY": 7,
    "VERTEX_SE3:QUAT": 8,
    "EDGE_SE3:QUAT": 30,
}
_INT_FIELDS = {
    "VERTEX_SE2": 1, "VERTEX_XY": 1, "VERTEX_SE3:QUAT": 1,
    "EDGE_SE2": 2, "EDGE_SE2_XY": 2, "EDGE_SE3:QUAT": 2,
}


def _token_column(line_text: str, token_index: int) -> int:
    """1-based character column of the token at token_index."""
    col = 0
    seen = -1
    in_token = False
    for pos, ch in enumerate(line_text):
        if ch.isspace():
            in_token = False
        elif not in_token:
            in_token = True
            seen += 1
            if seen == token_index:
                col = pos + 1
                break
    return col if col else len(line_text) + 1


def _upper_to_symmetric(values: list[float], size: int) -> np.ndarray:
    M = np.zeros((size, size))
    k = 0
    for r in range(size):
        for c in range(r, size):
            M[r, c] = values[k]
            M[c, r] = values[k]
            k += 1
    return M


def _is_positive_definite(M: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(M)
        return True
    except np.linalg.LinAlgError:
        return False


def _read_quaternion(vals, line: int) -> np.ndarray:
    """Validate and normalize; already-unit inputs pass through bit-exact."""
    quat = np.array(vals, dtype=float)
    norm = float(np.linalg.norm(quat))
    if abs(norm - 1.0) > _QUAT_NORM_SLACK:
        raise G2oParseError(line, 1, f"quaternion norm {norm:.6f} off unit")
    if abs(norm - 1.0) > 4e-15:
        quat = quat / norm
    return quat


def rotation_from_angle(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def angle_from_rotation(R: np.ndarray) -> float:
    return float(np.arctan2(R[1, 0], R[0, 0]))


def rotation_from_quaternion(qx, qy, qz, qw) -> np.ndarray:
    x, y, z, w = qx, qy, qz, qw
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quaternion_from_rotation(R: np.ndarray) -> np.ndarray:
    """(qx, qy, qz, qw) with nonnegative qw."""
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    else:
        a = int(np.argmax(np.diag(R)))
        b, c = (a + 1) % 3, (a + 2) % 3
        s = np.sqrt(1.0 + R[a, a] - R[b, b] - R[c, c]) * 2
        q = np.empty(4)
        q[a] = 0.25 * s
        q[b] = (R[b, a] + R[a, b]) / s
        q[c] = (R[c, a] + R[a, c]) / s
        q[3] = (R[c, b] - R[b, c]) / s
        qx, qy, qz, qw = q
    quat = np.array([qx, qy, qz, qw])
    if quat[3] < 0:
        quat = -quat
    return quat / np.linalg.norm(quat)


def parse_g2o_document(text: str) -> G2oDocument:
    """Tokenize and type-check every line; no cross-record validation yet."""
    records: list[G2oRecord] = []
    dimension = None
    isotropized_note = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            if stripped == _ISOTROPIZED_NOTE:
                isotropized_note = True
            continue
        tokens = stripped.split()
        tag = tokens[0]
        if tag not in _ARITY:
            raise G2oParseError(lineno, _token_column(raw, 0), f"unknown tag {tag!r}")
        tag_dim = 2 if tag in _TAGS_2D else 3
        if dimension is None:
            dimension = tag_dim
        elif dimension != tag_dim:
            raise G2oParseError(lineno, _token_column(raw, 0),
                                f"mixed dimensions: {tag!r} in a {dimension}-D document")
        expect = _ARITY[tag]
        if len(tokens) - 1 != expect:
            raise G2oParseError(lineno, _token_column(raw, min(len(tokens), expect)),
                                f"{tag} takes {expect} fields, got {len(tokens) - 1}")
        n_int = _INT_FIELDS[tag]
        values = []
        for k, tok in enumerate(tokens[1:]):
            try:
                values.append(int(tok) if k < n_int else float(tok))
            except ValueError:
                kind = "integer" if k < n_int else "number"
                raise G2oParseError(lineno, _token_column(raw, k + 1),
                                    f"expected {kind}, got {tok!r}") from None
        records.append(G2oRecord(tag, values, lineno))
    if dimension is None:
        raise G2oParseError(1, 1, "empty document")
    return G2oDocument(dimension, records, isotropized_note=isotropized_note)


def problem_from_document(doc: G2oDocument, name: str = "") -> Problem:
    d = doc.dimension
    poses: dict[int, Pose] = {}
    landmarks: dict[int, np.ndarray] = {}
    edges: list[MeasurementEdge] = []
    isotropized = doc.isotropized_note

    for rec in doc.records:
        v = rec.values
        if rec.tag in ("VERTEX_SE2", "VERTEX_SE3:QUAT"):
            if v[0] in poses:
                raise G2oParseError(rec.line, 1, f"duplicate pose id {v[0]}")
            if rec.tag == "VERTEX_SE2":
                poses[v[0]] = Pose(rotation_from_angle(v[3]), np.array(v[1:3]),
                                   raw_orientation=(v[3],))
            else:
                quat = _read_quaternion(v[4:8], rec.line)
                poses[v[0]] = Pose(rotation_from_quaternion(*quat), np.array(v[1:4]),
                                   raw_orientation=tuple(quat))
        elif rec.tag == "VERTEX_XY":
            if v[0] in landmarks:
                raise G2oParseError(rec.line, 1, f"duplicate landmark id {v[0]}")
            landmarks[v[0]] = np.array(v[1:3])

    for rec in doc.records:
        v = rec.values
        if rec.tag == "EDGE_SE2":
            i, j = v[0], v[1]
            for pid in (i, j):
                if pid not in poses:
                    raise G2oParseError(rec.line, 1, f"edge references unknown pose {pid}")
            info = _upper_to_symmetric(v[5:11], 3)
            if not _is_positive_definite(info):
                raise G2oParseError(rec.line, 1, "information matrix not positive definite")
            kappa, tau, iso = extract_precisions_se2(info)
            isotropized |= iso
            edges.append(relative_pose_edge(i, j, rotation_from_angle(v[4]),
                                            np.array(v[2:4]), kappa, tau,
                                            raw_orientation=(v[4],)))
        elif rec.tag == "EDGE_SE2_XY":
            i, k = v[0], v[1]
            if i not in poses:
                raise G2oParseError(rec.line, 1, f"edge references unknown pose {i}")
            if k not in landmarks:
                raise G2oParseError(rec.line, 1, f"edge references unknown landmark {k}")
            info = _upper_to_symmetric(v[4:7], 2)
            if not _is_positive_definite(info):
                raise G2oParseError(rec.line, 1, "information matrix not positive definite")
            tau, iso = float(np.mean(np.diag(info))), _is_anisotropic(info)
            isotropized |= iso
            edges.append(pose_landmark_edge(i, k, np.array(v[2:4]), tau))
        elif rec.tag == "EDGE_SE3:QUAT":
            i, j = v[0], v[1]
            for pid in (i, j):
                if pid not in poses:
                    raise G2oParseError(rec.line, 1, f"edge references unknown pose {pid}")
            quat = _read_quaternion(v[5:9], rec.line)
            info = _upper_to_symmetric(v[9:30], 6)
            if not _is_positive_definite(info):
                raise G2oParseError(rec.line, 1, "information matrix not positive definite")
            kappa, tau, iso = extract_precisions_se3(info)
            isotropized |= iso
            edges.append(relative_pose_edge(i, j, rotation_from_quaternion(*quat),
                                            np.array(v[2:5]), kappa, tau,
                                            raw_orientation=tuple(quat)))

    return Problem(d=d, poses=poses, landmarks=landmarks, edges=edges, name=name,
                   info_isotropized=isotropized)


def parse_g2o(text: str, name: str = "") -> Problem:
    return problem_from_document(parse_g2o_document(text), name=name)


def _is_anisotropic(info: np.ndarray) -> bool:
    diag = np.diag(info)
    off = info - np.diag(diag)
    return bool(np.any(off != 0.0) or np.ptp(diag) != 0.0)


def extract_precisions_se2(info: np.ndarray) -> tuple[float, float, bool]:
    """(kappa, tau, was_isotropized) from a 3x3 (x, y, theta) information."""
    if not _is_positive_definite(info):
        raise ValueError("information matrix not positive definite")
    tau = float(0.5 * (info[0, 0] + info[1, 1]))
    kappa = float(info[2, 2])
    iso = bool(np.any(info - np.diag(np.diag(info)) != 0.0) or info[0, 0] != info[1, 1])
    return kappa, tau, iso


def extract_precisions_se3(info: np.ndarray) -> tuple[float, float, bool]:
    """(kappa, tau, was_isotropized) from a 6x6 (translation, rotation) information."""
    if not _is_positive_definite(info):
        raise ValueError("information matrix not positive definite")
    tau = float(np.mean(np.diag(info)[:3]))
    kappa = float(np.mean(np.diag(info)[3:]))
    diag = np.diag(info)
    iso = bool(np.any(info - np.diag(diag) != 0.0)
               or np.ptp(diag[:3]) != 0.0 or np.ptp(diag[3:]) != 0.0)
    return kappa, tau, iso


def _fmt(x: float) -> str:
    return _FLOAT_FMT % x


def serialize_problem(problem: Problem) -> str:
    """Fixed-point text form: vertices by ascending id, then edges in order."""
    lines = []
    if problem.info_isotropized:
        lines.append(_ISOTROPIZED_NOTE)
    d = problem.d
    for i in sorted(problem.poses):
        pose = problem.poses[i]
        if d == 2:
            theta = (pose.raw_orientation[0] if pose.raw_orientation
                     else angle_from_rotation(pose.R))
            lines.append(f"VERTEX_SE2 {i} {_fmt(pose.t[0])} {_fmt(pose.t[1])} {_fmt(theta)}")
        else:
            q = (np.array(pose.raw_orientation) if pose.raw_orientation
                 else quaternion_from_rotation(pose.R))
            coords = " ".join(_fmt(x) for x in pose.t)
            quat = " ".join(_fmt(x) for x in q)
            lines.append(f"VERTEX_SE3:QUAT {i} {coords} {quat}")
    for k in sorted(problem.landmarks):
        if d != 2:
            raise ValueError("landmark serialization is only defined for 2-D problems")
        lm = problem.landmarks[k]
        lines.append(f"VERTEX_XY {k} {_fmt(lm[0])} {_fmt(lm[1])}")
    for e in problem.edges:
        if e.kind == "relative_pose":
            if d == 2:
                theta = (e.raw_orientation[0] if e.raw_orientation
                         else angle_from_rotation(e.rotation))
                info = f"{_fmt(e.tau)} 0 0 {_fmt(e.tau)} 0 {_fmt(e.kappa)}"
                lines.append(
                    f"EDGE_SE2 {e.i} {e.j} {_fmt(e.translation[0])} "
                    f"{_fmt(e.translation[1])} {_fmt(theta)} {info}")
            else:
                q = (np.array(e.raw_orientation) if e.raw_orientation
                     else quaternion_from_rotation(e.rotation))
                coords = " ".join(_fmt(x) for x in e.translation)
                quat = " ".join(_fmt(x) for x in q)
                upper = _upper_triangle_diag([e.tau] * 3 + [e.kappa] * 3)
                lines.append(f"EDGE_SE3:QUAT {e.i} {e.j} {coords} {quat} {upper}")
        else:
            info = f"{_fmt(e.tau)} 0 {_fmt(e.tau)}"
            lines.append(
                f"EDGE_SE2_XY {e.i} {e.j} {_fmt(e.translation[0])} "
                f"{_fmt(e.translation[1])} {info}")
    return "\n".join(lines) + "\n"


def _upper_triangle_diag(diag_vals) -> str:
    size = len(diag_vals)
    parts = []
    for r in range(size):
        for c in range(r, size):
            parts.append(_fmt(diag_vals[r]) if r == c else "0")
    return " ".join(parts)


def serialize_estimate_sidecar(est: Estimate) -> str:
    """Ground-truth sidecar: `id x y theta` rows (2-D poses), `id x y z qx qy
    qz qw` (3-D poses), and position-only rows for landmarks."""
    lines = []
    for i in sorted(est.rotations):
        R, t = est.rotations[i], est.translations[i]
        if est.d == 2:
            lines.append(f"{i} {_fmt(t[0])} {_fmt(t[1])} {_fmt(angle_from_rotation(R))}")
        else:
            q = quaternion_from_rotation(R)
            coords = " ".join(_fmt(x) for x in t)
            quat = " ".join(_fmt(x) for x in q)
            lines.append(f"{i} {coords} {quat}")
    for k in sorted(est.landmarks):
        coords = " ".join(_fmt(x) for x in est.landmarks[k])
        lines.append(f"{k} {coords}")
    return "\n".join(lines) + "\n"


def parse_estimate_sidecar(text: str, d: int) -> Estimate:
    """Inverse of serialize_estimate_sidecar; field count tells poses from
    landmarks (the dimension must be supplied)."""
    est = Estimate(d=d)
    pose_fields = 4 if d == 2 else 8
    lmk_fields = 1 + d
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        try:
            ident = int(tokens[0])
            vals = [float(t) for t in tokens[1:]]
        except ValueError:
            raise G2oParseError(lineno, 1, "malformed sidecar row") from None
        if len(tokens) == pose_fields:
            if d == 2:
                est.rotations[ident] = rotation_from_angle(vals[2])
                est.translations[ident] = np.array(vals[:2])
            else:
                quat = np.array(vals[3:7])
                quat /= np.linalg.norm(quat)
                est.rotations[ident] = rotation_from_quaternion(*quat)
                est.translations[ident] = np.array(vals[:3])
        elif len(tokens) == lmk_fields:
            est.landmarks[ident] = np.array(vals[:d])
        else:
            raise G2oParseError(lineno, 1,
                                f"row has {len(tokens)} fields, expected "
                                f"{pose_fields} (pose) or {lmk_fields} (landmark)")
    return est


def estimate_to_problem(problem: Problem, est: Estimate) -> Problem:
    """Copy of problem with vertex values replaced by the estimate."""
    poses = {i: Pose(np.array(est.rotations[i]), np.array(est.translations[i]))
             for i in problem.poses}
    landmarks = {k: np.array(est.landmarks[k]) for k in problem.landmarks}
    return Problem(d=problem.d, poses=poses, landmarks=landmarks,
                   edges=list(problem.edges), name=problem.name,
                   info_isotropized=problem.info_isotropized)


def has_odometry_chain(problem: Problem) -> bool:
    ids = sorted(problem.poses)
    odo = {(e.i, e.j) for e in problem.edges if e.edge_class == CLASS_ODOMETRY}
    return all((ids[k], ids[k + 1]) in odo or (ids[k + 1], ids[k]) in odo
               for k in range(len(ids) - 1))
