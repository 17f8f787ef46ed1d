import numpy as np
import pytest
import scipy.sparse as sp

from certignc.certifier import (
    EigsolverError,
    StaircaseConfig,
    build_certificate,
    certify,
    min_eigenpair,
    recover_multipliers,
    riemannian_staircase,
    saddle_escape,
)
from certignc.factor_graph import (
    Pose,
    Problem,
    assemble_data_matrix,
    evaluate_cost,
    lift_graph,
    pose_landmark_edge,
    relative_pose_edge,
)
from certignc.manifolds import Estimate, lift_estimate, random_point
from certignc.solver import SolverConfig, optimize
from certignc.synthetic import GenerationSpec, generate_synthetic

from oracles import (
    TwoAngleGridOracle,
    dense_min_eigenpair,
    dense_multiplier_least_squares,
    rot2,
)


def optimized_instance(n=5, seed=0, sigma_r=0.02, sigma_t=0.02, p=2):
    prob = generate_synthetic(
        GenerationSpec(n_poses=n, sigma_r=sigma_r, sigma_t=sigma_t), seed)
    g = lift_graph(prob, p)
    from certignc.gnc import odometry_estimate
    Y0 = lift_estimate(odometry_estimate(prob), g.layout, p)
    res = optimize(g, Y0, SolverConfig(gradient_norm_tol=1e-10, max_iterations=300))
    return prob, g, res.point


def planted_saddle_problem(seed=11):
    """Triangle ring where the doubled-winding heading is a strict rank-2
    local minimum (translation stiffness dominates rotation curvature)."""
    rng = np.random.default_rng(seed)
    pos = [np.array([np.cos(2 * np.pi * k / 3), np.sin(2 * np.pi * k / 3)])
           for k in range(3)]
    th = [float(np.arctan2(*(pos[(k + 1) % 3] - pos[k])[::-1])) for k in range(3)]
    sigma_r, sigma_t = 0.3, 0.05
    kappa, tau = 1.0 / sigma_r ** 2, 1.0 / sigma_t ** 2
    poses = {k: Pose(rot2(th[k]), pos[k]) for k in range(3)}
    edges = []
    for k in range(3):
        i, j = k, (k + 1) % 3
        Rm = rot2(th[i]).T @ rot2(th[j]) @ rot2(rng.normal(0.0, sigma_r))
        tm = rot2(th[i]).T @ (pos[j] - pos[i]) + rng.normal(0.0, sigma_t, 2)
        edges.append(relative_pose_edge(i, j, Rm, tm, kappa, tau))
    prob = Problem(d=2, poses=poses, edges=edges)
    wrapped = Estimate(d=2)
    for k in range(3):
        wrapped.rotations[k] = rot2(2.0 * th[k])
        wrapped.translations[k] = pos[k]
    return prob, wrapped


class TestRecoverMultipliers:
    def test_euclidean_only_problem_has_empty_multipliers(self):
        # landmark-only data matrix: certificate reduces to Q itself
        poses = {0: Pose(np.eye(2), np.zeros(2))}
        landmarks = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0])}
        edges = [pose_landmark_edge(0, k, landmarks[k], 1.0) for k in landmarks]
        prob = Problem(d=2, poses=poses, landmarks=landmarks, edges=edges)
        g = lift_graph(prob, 2)
        Q = assemble_data_matrix(g)
        Y = lift_estimate(prob.ground_truth_estimate(), g.layout, 2)
        lam = recover_multipliers(Q, Y)
        S = build_certificate(Q, lam)
        rng = np.random.default_rng(0)
        # the single pose still gets a block, but with no rotation factors it
        # only reflects that pose's constraints; landmark rows are untouched
        V = rng.standard_normal((Y.n, 3))
        lam_rows = S.matvec(V) - Q.matvec(V)
        assert np.linalg.norm(lam_rows[3:]) == 0.0

    def test_stationarity_residual_small_at_optimum(self):
        prob, g, Y = optimized_instance(seed=1)
        Q = assemble_data_matrix(g)
        lam = recover_multipliers(Q, Y)
        S = build_certificate(Q, lam)
        resid = np.linalg.norm(S.matvec(Y.stacked))
        Qnorm = np.linalg.norm(Q.dense())
        assert resid <= 1e-8 * Qnorm

    def test_matches_dense_kkt_least_squares(self):
        prob, g, Y = optimized_instance(n=2, seed=2)
        Q = assemble_data_matrix(g)
        lam = recover_multipliers(Q, Y)
        oracle = dense_multiplier_least_squares(Q.dense(), Y, g.layout)
        for pid, L in lam.items():
            assert np.linalg.norm(L - oracle[pid]) <= 1e-9

    def test_multipliers_symmetric(self):
        prob, g, Y = optimized_instance(seed=3)
        lam = recover_multipliers(assemble_data_matrix(g), Y)
        for L in lam.values():
            assert np.array_equal(L, L.T)


class TestBuildCertificate:
    def test_zero_multipliers_reproduce_q(self):
        prob, g, Y = optimized_instance(seed=4)
        Q = assemble_data_matrix(g)
        zero = {pid: np.zeros((2, 2)) for pid in g.layout.pose_ids}
        S = build_certificate(Q, zero)
        rng = np.random.default_rng(5)
        for _ in range(20):
            v = rng.standard_normal(Q.n)
            assert np.linalg.norm(S.matvec(v) - Q.matvec(v)) <= 1e-14

    def test_symmetric_operator(self):
        prob, g, Y = optimized_instance(seed=6)
        Q = assemble_data_matrix(g)
        S = build_certificate(Q, recover_multipliers(Q, Y))
        rng = np.random.default_rng(7)
        for _ in range(5):
            u, v = rng.standard_normal(Q.n), rng.standard_normal(Q.n)
            a, b = float(u @ S.matvec(v)), float(S.matvec(u) @ v)
            assert abs(a - b) <= 1e-12 * max(1.0, abs(a))

    def test_dense_materialization_matches_blockwise_formula(self):
        prob, g, Y = optimized_instance(n=4, seed=8)
        Q = assemble_data_matrix(g)
        lam = recover_multipliers(Q, Y)
        S = build_certificate(Q, lam)
        expected = Q.dense()
        for pid in g.layout.pose_ids:
            rows = g.layout.rotation_rows(pid)
            expected[rows, rows] -= lam[pid]
        # entrywise: apply to identity
        actual = S.matvec(np.eye(Q.n))
        assert np.allclose(actual, expected, atol=1e-12)


class TestMinEigenpair:
    def test_diagonal_matrix(self):
        lam, v = min_eigenpair(np.diag([3.0, -1.0, 7.0]))
        assert np.isclose(lam, -1.0, atol=1e-10)
        assert np.isclose(abs(v[1]), 1.0, atol=1e-8)

    def test_random_sparse_matches_dense_oracle(self):
        rng = np.random.default_rng(9)
        n = 200
        A = sp.random(n, n, density=0.03, random_state=42)
        A = (A + A.T).toarray()
        lam, v = min_eigenpair(A, tol=1e-10, max_iterations=n)
        lam_true, _ = dense_min_eigenpair(A)
        assert abs(lam - lam_true) <= 1e-8
        assert np.linalg.norm(A @ v - lam * v) <= 1e-6

    def test_path_graph_laplacian_nullspace(self):
        n = 50
        L = (np.diag(2.0 * np.ones(n)) - np.diag(np.ones(n - 1), 1)
             - np.diag(np.ones(n - 1), -1))
        L[0, 0] = L[-1, -1] = 1.0
        lam, v = min_eigenpair(L, tol=1e-10, max_iterations=n)
        assert abs(lam) <= 1e-9
        direction = v / v[0]
        assert np.allclose(direction, np.ones(n), atol=1e-6)

    def test_nonconvergence_raises_with_residual(self):
        rng = np.random.default_rng(10)
        A = rng.standard_normal((400, 400))
        A = A + A.T
        with pytest.raises(EigsolverError) as err:
            min_eigenpair(A, tol=1e-14, max_iterations=5)
        assert err.value.best_residual < np.inf


class TestCertify:
    def test_noiseless_optimum_certifies(self):
        prob = generate_synthetic(GenerationSpec(n_poses=5, sigma_r=0, sigma_t=0), 1)
        g = lift_graph(prob, 2)
        Y = lift_estimate(prob.ground_truth_estimate(), g.layout, 2)
        Q = assemble_data_matrix(g)
        cert = certify(Q, Y, eta=1e-8)
        assert cert.certified
        assert cert.lambda_min >= -1e-8

    def test_lower_bound_contract_on_certified_stage(self):
        prob = generate_synthetic(GenerationSpec(n_poses=8, sigma_r=0.02,
                                                 sigma_t=0.02), 2)
        g = lift_graph(prob, 2)
        Y0 = lift_estimate(prob.ground_truth_estimate(), g.layout, 2)
        res = riemannian_staircase(g, Y0, StaircaseConfig())
        assert res.certified
        assert res.f_sdp <= res.f_qcqp + 1e-9 * (1.0 + abs(res.f_qcqp))

    def test_planted_saddle_yields_negative_curvature(self):
        prob, wrapped = planted_saddle_problem()
        g = lift_graph(prob, 2)
        Y0 = lift_estimate(wrapped, g.layout, 2)
        stuck = optimize(g, Y0, SolverConfig()).point
        Q = assemble_data_matrix(g)
        cert = certify(Q, stuck, eta=1e-6)
        assert not cert.certified
        assert cert.lambda_min < -1e-6
        quad = float(cert.v_min @ build_certificate(Q, cert.multipliers)
                     .matvec(cert.v_min))
        assert quad < 0.0


class TestSaddleEscape:
    def _stuck_point(self):
        prob, wrapped = planted_saddle_problem()
        g = lift_graph(prob, 2)
        Y0 = lift_estimate(wrapped, g.layout, 2)
        Y = optimize(g, Y0, SolverConfig()).point
        Q = assemble_data_matrix(g)
        cert = certify(Q, Y, eta=1e-6)
        return prob, g, Y, Q, cert

    def test_escape_strictly_decreases_cost(self):
        prob, g, Y, Q, cert = self._stuck_point()
        escaped = saddle_escape(g, Y, cert.v_min, cert.lambda_min, Q=Q)
        assert escaped.p == Y.p + 1
        assert Q.quadratic_form(escaped.stacked) < Q.quadratic_form(Y.stacked)

    def test_escape_direction_is_tangent(self):
        prob, g, Y, Q, cert = self._stuck_point()
        from certignc.manifolds import lift_point
        Y_up = lift_point(Y, Y.p + 1)
        D = np.zeros_like(Y_up.stacked)
        D[:, -1] = cert.v_min
        for start in g.layout.rotation_row_starts():
            M = Y_up.stacked[start:start + 2]
            V = D[start:start + 2]
            assert np.linalg.norm(M @ V.T + V @ M.T) <= 1e-12

    def test_escape_plus_reoptimization_reaches_global(self):
        prob, g, Y, Q, cert = self._stuck_point()
        oracle_min, _, _ = TwoAngleGridOracle(prob).minimum()
        stuck_cost = Q.quadratic_form(Y.stacked)
        assert stuck_cost > oracle_min * 1.5  # genuinely suboptimal
        res = riemannian_staircase(g, Y, StaircaseConfig())
        assert res.certified
        assert res.termination_rank <= Y.p + 2
        assert abs(res.f_qcqp - oracle_min) <= 1e-6 * abs(oracle_min)


class TestRiemannianStaircase:
    def test_noiseless_random_init_certifies_early(self):
        prob = generate_synthetic(GenerationSpec(n_poses=10, sigma_r=0, sigma_t=0), 3)
        g = lift_graph(prob, 2)
        Y0 = random_point(g.layout, 4, p=2)
        res = riemannian_staircase(g, Y0, StaircaseConfig())
        assert res.certified
        assert len(res.stages) <= 2
        assert abs(res.f_sdp) <= 1e-9
        assert abs(res.f_qcqp) <= 1e-9

    def test_zero_outlier_weighted_problem_gap(self):
        prob = generate_synthetic(GenerationSpec(n_poses=12, sigma_r=0.01,
                                                 sigma_t=0.05), 5)
        g = lift_graph(prob, 2)
        Y0 = random_point(g.layout, 6, p=2)
        res = riemannian_staircase(g, Y0, StaircaseConfig())
        assert res.certified
        from certignc.gnc import suboptimality_gap
        gap, is_relative = suboptimality_gap(res.f_qcqp, res.f_sdp)
        assert gap <= 1e-9

    def test_p_max_exceeded_reports_uncertified(self):
        prob, wrapped = planted_saddle_problem()
        g = lift_graph(prob, 2)
        Y0 = lift_estimate(wrapped, g.layout, 2)
        res = riemannian_staircase(g, Y0, StaircaseConfig(p_max=2))
        assert not res.certified
        assert res.f_sdp is None
        assert res.termination_rank <= 2

    def test_certificate_matches_dense_sign_test(self):
        # certified flag agrees with the dense eigendecomposition at slack eta
        for seed in range(5):
            prob, g, Y = optimized_instance(n=5, seed=20 + seed,
                                            sigma_r=0.05, sigma_t=0.05)
            Q = assemble_data_matrix(g)
            eta = StaircaseConfig().resolved_eta(Q)
            cert = certify(Q, Y, eta)
            S = build_certificate(Q, cert.multipliers)
            lam_true, _ = dense_min_eigenpair(S.matvec(np.eye(Q.n)))
            assert abs(cert.lambda_min - lam_true) <= 1e-8
            assert cert.certified == (lam_true >= -eta - 1e-9)
