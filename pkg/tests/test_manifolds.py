import numpy as np
import pytest

from certignc.manifolds import (
    BlockLayout,
    DegenerateInputError,
    Estimate,
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
    tangent_project_block,
)

from oracles import procrustes_distance, rot2


def small_layout(d=2, n_poses=2, n_lmk=0):
    return BlockLayout(d, tuple(range(n_poses)), tuple(range(n_lmk)))


class TestProjectToStiefel:
    def test_already_feasible_is_identity(self):
        A = np.hstack([np.eye(2), np.zeros((2, 1))])
        assert np.allclose(project_to_stiefel(A), A, atol=1e-14)

    def test_single_row_normalizes(self):
        out = project_to_stiefel(np.array([[3.0, 4.0]]))
        assert np.allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_matches_dense_svd_argmin(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            A = rng.standard_normal((2, 4))
            # condition numbers of Gaussian 2x4 are essentially always < 1e3
            M = project_to_stiefel(A)
            U, s, Vt = np.linalg.svd(A, full_matrices=False)
            oracle = U @ Vt
            assert np.linalg.norm(A - M) <= np.linalg.norm(A - oracle) + 1e-9
            assert abs(np.linalg.norm(A - M) - np.linalg.norm(A - oracle)) <= 1e-9

    def test_rank_deficient_raises(self):
        A = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        with pytest.raises(DegenerateInputError):
            project_to_stiefel(A)


class TestTangentProject:
    def test_projecting_base_point_gives_zero(self):
        Y = random_point(small_layout(), seed=1, p=3)
        V = tangent_project(Y, np.array(Y.stacked))
        rot_rows = [slice(0, 2), slice(3, 5)]
        for rows in rot_rows:
            assert np.linalg.norm(V.stacked[rows]) <= 1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        Y = random_point(small_layout(), seed=3, p=4)
        G = rng.standard_normal(Y.stacked.shape)
        V1 = tangent_project(Y, G)
        V2 = tangent_project(Y, V1.stacked)
        assert np.linalg.norm(V1.stacked - V2.stacked) <= 1e-12

    def test_orthogonal_to_normal_space_basis(self):
        rng = np.random.default_rng(4)
        d, p = 3, 5
        M = project_to_stiefel(rng.standard_normal((d, p)))
        G = rng.standard_normal((d, p))
        V = tangent_project_block(M, G)
        # normal space is {Sym(E) M} over the symmetric generators
        for a in range(d):
            for b in range(a, d):
                E = np.zeros((d, d))
                E[a, b] = E[b, a] = 1.0
                normal = E @ M
                assert abs(np.sum(V * normal)) <= 1e-10

    def test_tangent_invariant(self):
        rng = np.random.default_rng(5)
        Y = random_point(small_layout(d=3), seed=6, p=5)
        V = tangent_project(Y, rng.standard_normal(Y.stacked.shape))
        d = 3
        for start in Y.layout.rotation_row_starts():
            Mb = Y.stacked[start:start + d]
            Vb = V.stacked[start:start + d]
            assert np.linalg.norm(Mb @ Vb.T + Vb @ Mb.T) <= 1e-10


class TestRetract:
    def test_zero_step_identity(self):
        Y = random_point(small_layout(), seed=7, p=3)
        V = tangent_project(Y, np.ones_like(Y.stacked))
        out = retract(Y, V, 0.0)
        assert out.stacked is Y.stacked

    def test_euclidean_only_is_addition(self):
        layout = BlockLayout(2, (), (0, 1, 2))
        rng = np.random.default_rng(8)
        Y = ProductPoint(layout, rng.standard_normal((3, 4)))
        V = TangentVector(layout, rng.standard_normal((3, 4)))
        out = retract(Y, V, 1.0)
        assert np.allclose(out.stacked, Y.stacked + V.stacked, atol=1e-15)

    def test_first_order_agreement(self):
        rng = np.random.default_rng(9)
        Y = random_point(small_layout(d=3, n_poses=3), seed=10, p=4)
        V = tangent_project(Y, rng.standard_normal(Y.stacked.shape))
        ratios = []
        for t in (1e-2, 1e-3, 1e-4):
            drift = np.linalg.norm(retract(Y, V, t).stacked - Y.stacked - t * V.stacked)
            ratios.append(drift / t ** 2)
        assert max(ratios) <= 2.0 * min(ratios) + 1e-9

    def test_retraction_derivative_matches_tangent(self):
        rng = np.random.default_rng(11)
        Y = random_point(small_layout(), seed=12, p=3)
        V = tangent_project(Y, rng.standard_normal(Y.stacked.shape))
        h = 1e-6
        fd = (retract(Y, V, h).stacked - retract(Y, V, -h).stacked) / (2 * h)
        rel = np.linalg.norm(fd - V.stacked) / max(np.linalg.norm(V.stacked), 1e-12)
        assert rel <= 1e-6

    def test_feasibility_preserved(self):
        rng = np.random.default_rng(13)
        Y = random_point(small_layout(d=3), seed=14, p=5)
        V = tangent_project(Y, rng.standard_normal(Y.stacked.shape))
        out = retract(Y, V, 0.7)
        assert out.feasibility_defect() <= 1e-10


class TestLiftPoint:
    def test_same_rank_identity(self):
        Y = random_point(small_layout(), seed=15, p=3)
        assert lift_point(Y, 3) is Y

    def test_lift_keeps_orthonormal_rows_exactly(self):
        Y = random_point(small_layout(), seed=16, p=2)
        up = lift_point(Y, 3)
        for start in up.layout.rotation_row_starts():
            M = up.stacked[start:start + 2]
            assert np.array_equal(M @ M.T, np.eye(2)) or \
                np.linalg.norm(M @ M.T - np.eye(2)) <= 1e-15

    def test_lower_rank_raises(self):
        Y = random_point(small_layout(), seed=17, p=3)
        with pytest.raises(ValueError):
            lift_point(Y, 2)

    def test_cost_invariant_under_lift(self):
        # <Q, YY^T> depends on Y through YY^T only; zero columns change nothing
        rng = np.random.default_rng(18)
        Y = random_point(small_layout(n_poses=3), seed=19, p=3)
        Qd = rng.standard_normal((Y.n, Y.n))
        Qd = Qd + Qd.T
        up = lift_point(Y, 5)
        c0 = np.sum(Y.stacked * (Qd @ Y.stacked))
        c1 = np.sum(up.stacked * (Qd @ up.stacked))
        assert abs(c0 - c1) <= 1e-14 * max(1.0, abs(c0))


class TestRandomPoint:
    def test_deterministic_per_seed(self):
        a = random_point(small_layout(d=3, n_lmk=2), seed=20, p=4)
        b = random_point(small_layout(d=3, n_lmk=2), seed=20, p=4)
        assert np.array_equal(a.stacked, b.stacked)

    def test_feasible(self):
        Y = random_point(small_layout(d=3, n_poses=4), seed=21, p=5)
        assert Y.feasibility_defect() <= 1e-12

    def test_rank_below_d_raises(self):
        with pytest.raises(ValueError):
            random_point(small_layout(d=3), seed=0, p=2)

    def test_gram_mean_unbiased(self):
        # mean of M M^T over many draws is the identity (per-entry 3 sigma)
        layout = BlockLayout(2, (0,), ())
        draws = 10_000
        acc = np.zeros((2, 2))
        for s in range(draws):
            M = random_point(layout, seed=s, p=3).stacked[:2]
            acc += M @ M.T
        acc /= draws
        # rows are exactly orthonormal so this is an exactness check
        assert np.linalg.norm(acc - np.eye(2)) <= 1e-10


class TestRoundSolution:
    def _feasible_rank_d_point(self, seed, layout):
        """Estimate-backed point: rotation blocks are proper rotations."""
        rng = np.random.default_rng(seed)
        est = Estimate(d=layout.d)
        for i in layout.pose_ids:
            est.rotations[i] = rot2(rng.uniform(-np.pi, np.pi))
            est.translations[i] = rng.standard_normal(layout.d)
        for k in layout.landmark_ids:
            est.landmarks[k] = rng.standard_normal(layout.d)
        return lift_estimate(est, layout, layout.d)

    def test_recovers_padded_rank_d_point(self):
        layout = small_layout(n_poses=3, n_lmk=2)
        X = self._feasible_rank_d_point(22, layout)
        padded = lift_point(X, 5)
        est = round_solution(padded)
        Xhat = lift_estimate(est, layout, layout.d)
        assert procrustes_distance(Xhat.stacked, X.stacked) <= 1e-9

    def test_majority_reflection_fixed_globally(self):
        layout = small_layout(n_poses=3)
        X = self._feasible_rank_d_point(23, layout)
        flip = np.diag([1.0, -1.0])
        reflected = ProductPoint(layout, X.stacked @ flip)
        est = round_solution(reflected)
        for R in est.rotations.values():
            assert np.linalg.det(R) > 0
            assert np.linalg.norm(R @ R.T - np.eye(2)) <= 1e-9

    def test_rotations_are_special_orthogonal(self):
        layout = small_layout(d=3, n_poses=4, n_lmk=1)
        Y = random_point(layout, seed=24, p=5)
        est = round_solution(Y)
        for R in est.rotations.values():
            assert np.linalg.norm(R @ R.T - np.eye(3)) <= 1e-9
            assert abs(np.linalg.det(R) - 1.0) <= 1e-9

    def test_gauge_covariance(self):
        rng = np.random.default_rng(25)
        layout = small_layout(n_poses=3, n_lmk=1)
        Y = random_point(layout, seed=26, p=4)
        G, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        Yg = ProductPoint(layout, Y.stacked @ G)
        a = lift_estimate(round_solution(Y), layout, 2)
        b = lift_estimate(round_solution(Yg), layout, 2)
        assert procrustes_distance(a.stacked, b.stacked) <= 1e-8


class TestTypes:
    def test_stiefel_invariant_enforced(self):
        with pytest.raises(ValueError):
            LiftedStiefelPoint(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_d_greater_than_p_rejected(self):
        with pytest.raises(ValueError):
            LiftedStiefelPoint(np.vstack([np.eye(2), [0.0, 1.0]]))

    def test_product_point_blocks_iterate_in_canonical_order(self):
        layout = BlockLayout(2, (3, 1), (7, 2))
        Y = random_point(layout, seed=27, p=3)
        keys = [key for key, _ in Y.blocks()]
        assert keys == [("rot", 1), ("tra", 1), ("rot", 3), ("tra", 3),
                        ("lmk", 2), ("lmk", 7)]

    def test_estimate_round_trip_through_lift(self):
        est = Estimate(d=2)
        est.rotations[0] = rot2(0.3)
        est.translations[0] = np.array([1.0, -2.0])
        est.rotations[1] = rot2(-1.1)
        est.translations[1] = np.array([0.5, 0.0])
        est.landmarks[4] = np.array([2.0, 2.0])
        layout = BlockLayout(2, (0, 1), (4,))
        Y = lift_estimate(est, layout, 4)
        back = round_solution(Y)
        for i in est.rotations:
            assert np.allclose(back.rotations[i], est.rotations[i], atol=1e-9) or \
                procrustes_distance(
                    lift_estimate(back, layout, 2).stacked,
                    lift_estimate(est, layout, 2).stacked) <= 1e-9
