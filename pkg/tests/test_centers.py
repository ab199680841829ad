"""Center geometry: uniformity optimization, EMA means, exact allocation."""

import itertools

import numpy as np
import pytest

from adacontrast.centers import (
    Assignment,
    ClassCenters,
    DegenerateBatchMeanError,
    EmpiricalMeans,
    NotConvergedError,
    UniformityConfig,
    UninitializedMeansError,
    allocate_centers,
    assignment_cost,
    precompute_centers,
    tangent_project,
    uniformity_loss_and_grad,
    update_empirical_means,
)
from adacontrast.numerics import (
    RngStream,
    finite_diff_gradient,
    gradient_max_rel_error,
    normalize_rows,
)


def unit_rows(gen, K, d):
    return normalize_rows(gen.standard_normal((K, d)))


class TestUniformityLoss:
    def test_single_center_self_term(self):
        # one unit vector: log(exp(1)) = 1
        psi = np.array([[1.0, 0.0]])
        loss, _ = uniformity_loss_and_grad(psi, tau=1.0)
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_antipodal_pair_value(self):
        psi = np.array([[1.0, 0.0], [-1.0, 0.0]])
        loss, _ = uniformity_loss_and_grad(psi, tau=1.0)
        assert loss == pytest.approx(2.0 * np.log(np.e + np.exp(-1.0)), abs=1e-12)

    def test_gradient_against_finite_differences(self):
        gen = RngStream(0).substream("unif-fd").generator()
        psi = unit_rows(gen, 4, 8)

        def f(flat):
            return uniformity_loss_and_grad(flat.reshape(4, 8), tau=0.7)[0]

        _, hand = uniformity_loss_and_grad(psi, tau=0.7)
        oracle = finite_diff_gradient(f, psi)
        assert gradient_max_rel_error(hand, oracle) < 1e-6

    def test_tangent_projection_removes_radial_component(self):
        gen = RngStream(1).substream("tangent").generator()
        psi = unit_rows(gen, 3, 5)
        g = gen.standard_normal((3, 5))
        t = tangent_project(g, psi)
        np.testing.assert_allclose(np.sum(t * psi, axis=1), 0.0, atol=1e-12)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            uniformity_loss_and_grad(np.ones(3), tau=1.0)
        with pytest.raises(ValueError):
            uniformity_loss_and_grad(np.ones((2, 2)), tau=0.0)


class TestPrecompute:
    def test_two_centers_antipodal(self):
        cc = precompute_centers(2, 2)
        ip = float(cc.centers[0] @ cc.centers[1])
        assert abs(ip - (-1.0)) < 1e-3

    def test_three_centers_simplex(self):
        cc = precompute_centers(3, 128)
        g = cc.centers @ cc.centers.T
        off = g[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off, -0.5, atol=1e-3)

    def test_four_centers_simplex(self):
        cc = precompute_centers(4, 128)
        g = cc.centers @ cc.centers.T
        off = g[~np.eye(4, dtype=bool)]
        np.testing.assert_allclose(off, -1.0 / 3.0, atol=1e-3)

    def test_deterministic_per_seed(self):
        a = precompute_centers(4, 16, UniformityConfig(seed=3))
        b = precompute_centers(4, 16, UniformityConfig(seed=3))
        np.testing.assert_array_equal(a.centers, b.centers)

    def test_rows_are_unit_norm(self):
        cc = precompute_centers(5, 32)
        np.testing.assert_allclose(np.linalg.norm(cc.centers, axis=1), 1.0, atol=1e-12)

    def test_tight_simplex_warns_when_dim_too_small(self):
        with pytest.warns(UserWarning, match="simplex does not fit"):
            precompute_centers(4, 2, UniformityConfig(max_iters=50, grad_tol=1e-1))

    def test_not_converged_raises(self):
        with pytest.raises(NotConvergedError):
            precompute_centers(6, 64, UniformityConfig(max_iters=3))

    def test_needs_two_centers(self):
        with pytest.raises(ValueError):
            precompute_centers(1, 8)

    def test_centers_container_validates(self):
        with pytest.raises(ValueError):
            ClassCenters(K=2, d=2, centers=np.ones((2, 2)), tau_unif=1.0)


class TestEmpiricalMeans:
    def test_full_rate_replaces(self):
        m = EmpiricalMeans(K=2, d=2, eta=1.0)
        feats = np.array([[1.0, 0.0], [0.0, 1.0]])
        m = update_empirical_means(m, feats, np.array([1, 1]))
        m = update_empirical_means(m, np.array([[0.0, 1.0]]), np.array([1]))
        np.testing.assert_allclose(m.means[0], [0.0, 1.0])

    def test_matching_batch_is_a_fixed_point(self):
        e1 = np.array([1.0, 0.0])
        m = EmpiricalMeans(K=1, d=2, eta=0.5)
        m = update_empirical_means(m, e1[None], np.array([1]))
        m = update_empirical_means(m, e1[None], np.array([1]))
        np.testing.assert_array_equal(m.means[0], e1)

    def test_absent_class_bitwise_unchanged(self):
        gen = RngStream(5).substream("means").generator()
        m = EmpiricalMeans(K=3, d=4)
        m = update_empirical_means(m, unit_rows(gen, 6, 4), np.array([1, 1, 2, 2, 3, 3]))
        before = m.means[2].copy()
        m = update_empirical_means(m, unit_rows(gen, 2, 4), np.array([1, 2]))
        np.testing.assert_array_equal(m.means[2], before)

    def test_first_observation_sets_mean_directly(self):
        m = EmpiricalMeans(K=2, d=2, eta=0.1)
        feats = np.array([[0.0, 2.0]])
        m = update_empirical_means(m, feats, np.array([2]))
        np.testing.assert_allclose(m.means[1], [0.0, 1.0])
        assert not m.initialized[0] and m.initialized[1]

    def test_blend_uses_normalized_batch_mean(self):
        m = EmpiricalMeans(K=1, d=2, eta=0.5)
        m = update_empirical_means(m, np.array([[1.0, 0.0]]), np.array([1]))
        m = update_empirical_means(m, np.array([[0.0, 1.0]]), np.array([1]))
        expect = np.array([0.5, 0.5]) / np.linalg.norm([0.5, 0.5])
        np.testing.assert_allclose(m.means[0], expect)

    def test_degenerate_batch_sum(self):
        m = EmpiricalMeans(K=1, d=2)
        feats = np.array([[1.0, 0.0], [-1.0, 0.0]])
        with pytest.raises(DegenerateBatchMeanError):
            update_empirical_means(m, feats, np.array([1, 1]))

    def test_label_range_checked(self):
        m = EmpiricalMeans(K=2, d=2)
        with pytest.raises(ValueError):
            update_empirical_means(m, np.eye(2), np.array([1, 3]))


class TestAllocation:
    def make_centers(self, seed, K, d=6):
        gen = RngStream(seed).substream("alloc").generator()
        return ClassCenters(K=K, d=d, centers=unit_rows(gen, K, d), tau_unif=1.0)

    def means_from(self, centers, perm, jitter=0.0, gen=None):
        rows = centers.centers[list(perm)].copy()
        if jitter:
            rows = normalize_rows(rows + jitter * gen.standard_normal(rows.shape))
        m = EmpiricalMeans(K=centers.K, d=centers.d)
        m.means = rows
        m.initialized = np.ones(centers.K, dtype=bool)
        return m

    def test_exact_match_recovers_permutation(self):
        cc = self.make_centers(0, 3)
        # class c's mean placed on center (2, 0, 1)[c]
        means = self.means_from(cc, (2, 0, 1))
        assert allocate_centers(cc, means).pi == (2, 0, 1)

    def test_single_class_identity(self):
        gen = RngStream(2).substream("k1").generator()
        cc = ClassCenters(K=1, d=4, centers=unit_rows(gen, 1, 4), tau_unif=1.0)
        means = self.means_from(cc, (0,))
        assert allocate_centers(cc, means).pi == (0,)

    @pytest.mark.parametrize("K", [2, 3, 4, 5])
    def test_matches_brute_force(self, K):
        gen = RngStream(7).substream("brute", K).generator()
        for trial in range(20):
            cc = ClassCenters(
                K=K, d=5, centers=unit_rows(gen, K, 5), tau_unif=1.0
            )
            m = EmpiricalMeans(K=K, d=5)
            m.means = unit_rows(gen, K, 5)
            m.initialized = np.ones(K, dtype=bool)
            got = allocate_centers(cc, m)
            best = min(
                itertools.permutations(range(K)),
                key=lambda p: assignment_cost(cc, m, p),
            )
            assert assignment_cost(cc, m, got.pi) == assignment_cost(cc, m, best)

    def test_uninitialized_means_rejected(self):
        cc = self.make_centers(1, 3)
        m = EmpiricalMeans(K=3, d=6)
        m.means[0] = cc.centers[0]
        m.initialized[0] = True
        with pytest.raises(UninitializedMeansError) as exc:
            allocate_centers(cc, m)
        assert exc.value.missing_classes == [2, 3]

    def test_shape_mismatch_rejected(self):
        cc = self.make_centers(1, 3)
        m = EmpiricalMeans(K=4, d=6)
        with pytest.raises(ValueError):
            allocate_centers(cc, m)

    def test_ties_break_lexicographically(self):
        # two identical centers: both orders cost the same, smallest pi wins
        c = normalize_rows(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        cc = ClassCenters(K=3, d=2, centers=c, tau_unif=1.0)
        m = EmpiricalMeans(K=3, d=2)
        m.means = c.copy()
        m.initialized = np.ones(3, dtype=bool)
        assert allocate_centers(cc, m).pi == (0, 1, 2)

    def test_large_k_uses_hungarian_and_agrees_with_cost(self):
        gen = RngStream(9).substream("bigk").generator()
        K = 9  # above the exhaustive-search cutoff
        cc = ClassCenters(K=K, d=12, centers=unit_rows(gen, K, 12), tau_unif=1.0)
        means = self.means_from(cc, tuple(np.roll(np.arange(K), 4)))
        got = allocate_centers(cc, means)
        assert got.pi == tuple(np.roll(np.arange(K), 4))

    def test_assignment_validates_permutation(self):
        with pytest.raises(ValueError):
            Assignment(pi=(0, 0, 1))

    def test_center_for_class_uses_one_based_ids(self):
        cc = self.make_centers(3, 3)
        a = Assignment(pi=(2, 0, 1))
        np.testing.assert_array_equal(a.center_for_class(1, cc), cc.centers[2])
        np.testing.assert_array_equal(a.center_for_class(3, cc), cc.centers[1])
