import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srlab.errors import InvalidSupport, NonFiniteInput, NumericUnderflow, ShapeMismatch, StepTooLarge
from srlab.ot_core import (
    MarginalPair,
    SolverConfig,
    bilevel_baseline,
    kl_div,
    oracle_solve,
    semi_relaxed_ot,
    sinkhorn_balanced,
    srot_objective,
)

TIGHT = dict(tol=1e-12, max_iter=200_000)


def random_probs(rng, m, n, sharp=1.0):
    logits = sharp * rng.normal(size=(m, n))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def objective_fsum(q, p, gamma, epsilon, nu):
    """Scalar re-summation with math.fsum (exactly rounded sums)."""
    m, n = len(q), len(q[0])
    cost = math.fsum(q[i][j] / m * -math.log(p[i][j]) for i in range(m) for j in range(n))
    w = [math.fsum(q[i][j] for i in range(m)) / m for j in range(n)]
    kl = math.fsum(w[j] * math.log(w[j] / nu[j]) for j in range(n) if w[j] > 0)
    neg_ent = math.fsum(q[i][j] / m * math.log(q[i][j] / m) for i in range(m) for j in range(n) if q[i][j] > 0)
    return cost + gamma * kl + epsilon * neg_ent


def log_sinkhorn_reference(p, epsilon, tol=1e-13, max_iter=500_000):
    """Plain log-domain balanced Sinkhorn written independently of the package."""
    m, n = p.shape
    c = -np.log(p)
    f, g = np.zeros(m), np.zeros(n)
    for _ in range(max_iter):
        z = (g[None, :] - c) / epsilon
        f = -epsilon * (np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)) - epsilon * np.log(m)
        z = (f[:, None] - c) / epsilon
        g_new = -epsilon * (np.log(np.exp(z - z.max(0, keepdims=True)).sum(0)) + z.max(0)) - epsilon * np.log(n)
        if np.max(np.abs(g_new - g)) < tol:
            g = g_new
            break
        g = g_new
    z = (f[:, None] + g[None, :] - c) / epsilon
    pi = np.exp(z)
    return m * pi / (m * pi).sum(1, keepdims=True)


class TestKL:
    def test_identity(self):
        u = np.full(5, 0.2)
        assert kl_div(u, u) == 0.0

    def test_point_mass(self):
        assert kl_div([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)

    def test_three_quarters(self):
        expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
        assert expected == pytest.approx(0.130812, abs=1e-6)
        assert kl_div([0.75, 0.25], [0.5, 0.5]) == pytest.approx(expected, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ShapeMismatch):
            kl_div([0.5, 0.5], [1.0])
        with pytest.raises(InvalidSupport):
            kl_div([0.5, 0.5], [1.0, 0.0])

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8))
    def test_nonnegative(self, xs):
        p = np.array(xs) / sum(xs)
        q = np.full(len(xs), 1.0 / len(xs))
        assert kl_div(p, q) >= 0.0


class TestObjective:
    def test_one_hot_cost(self):
        assert srot_objective([[1.0, 0.0]], [[0.5, 0.5]], 0.0, 0.0) == pytest.approx(0.6931, abs=1e-4)

    def test_uniform_columns_zero_kl(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = np.array([[0.7, 0.3], [0.4, 0.6]])
        assert srot_objective(q, p, 3.0, 0.0) == srot_objective(q, p, 0.0, 0.0)

    def test_matches_fsum_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            p = random_probs(rng, 7, 4)
            q = random_probs(rng, 7, 4)
            nu = rng.dirichlet(np.ones(4))
            got = srot_objective(q, p, 0.7, 0.3, nu)
            want = objective_fsum(q.tolist(), p.tolist(), 0.7, 0.3, nu.tolist())
            assert got == pytest.approx(want, rel=1e-12, abs=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            srot_objective(np.ones((2, 2)) / 2, np.ones((3, 2)) / 2, 1.0, 0.1)


class TestBalanced:
    def test_uniform_symmetry(self):
        plan = sinkhorn_balanced(np.full((4, 2), 0.5), SolverConfig(epsilon=1.0))
        np.testing.assert_allclose(plan.values, 0.5, atol=1e-12)
        assert plan.converged

    def test_diagonal_small_epsilon(self):
        p = np.array([[0.9, 0.1], [0.1, 0.9]])
        eps = 0.01
        # brute force over the one-parameter family of feasible 2x2 plans
        ts = np.linspace(0.0, 1.0, 100_001)
        best_t, best = None, np.inf
        for t in ts[1:-1]:
            q = np.array([[t, 1 - t], [1 - t, t]])
            val = srot_objective(q, p, 0.0, eps)
            if val < best:
                best_t, best = t, val
        plan = sinkhorn_balanced(p, SolverConfig(epsilon=eps, **TIGHT))
        want = np.array([[best_t, 1 - best_t], [1 - best_t, best_t]])
        np.testing.assert_allclose(plan.values, want, atol=1e-4)
        np.testing.assert_allclose(plan.values, np.eye(2), atol=1e-3)
        assert plan.meta["log_domain"]

    def test_matches_log_domain_reference(self):
        rng = np.random.default_rng(5)
        p = random_probs(rng, 3, 3)
        plan = sinkhorn_balanced(p, SolverConfig(epsilon=0.1, **TIGHT))
        ref = log_sinkhorn_reference(p, 0.1)
        a = srot_objective(plan, p, 0.0, 0.1)
        b = srot_objective(ref, p, 0.0, 0.1)
        assert abs(a - b) <= 1e-6 * abs(b)

    def test_column_marginals(self):
        rng = np.random.default_rng(6)
        p = random_probs(rng, 30, 5, sharp=2.0)
        plan = sinkhorn_balanced(p, SolverConfig(epsilon=0.1, tol=1e-10, max_iter=100_000))
        np.testing.assert_allclose(plan.values.sum(1), 1.0, atol=1e-9)
        np.testing.assert_allclose(plan.column_marginal(), 0.2, atol=1e-6)

    def test_cap_reports_not_converged(self):
        rng = np.random.default_rng(7)
        p = random_probs(rng, 20, 4, sharp=3.0)
        plan = sinkhorn_balanced(p, SolverConfig(epsilon=0.05, tol=1e-14, max_iter=3))
        assert not plan.converged
        assert plan.iterations == 3
        assert plan.final_residual > 0

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            sinkhorn_balanced(np.array([[np.nan, 1.0]]))


class TestSemiRelaxed:
    def test_gamma_zero_closed_form(self):
        p = np.array([[0.8, 0.2], [0.6, 0.4]])
        plan = semi_relaxed_ot(p, SolverConfig(epsilon=1.0, gamma=0.0))
        np.testing.assert_allclose(plan.values, p, atol=1e-12)

    def test_large_gamma_recovers_balanced(self):
        rng = np.random.default_rng(21)
        p = random_probs(rng, 6, 3, sharp=2.0)
        cfg = SolverConfig(epsilon=0.05, gamma=1e6, **TIGHT)
        a = semi_relaxed_ot(p, cfg).values
        b = sinkhorn_balanced(p, cfg).values
        assert np.max(np.abs(a - b)) <= 1e-4
        np.testing.assert_allclose(a.sum(0) / 6, 1 / 3, atol=1e-3)

    def test_matches_oracle(self):
        rng = np.random.default_rng(8)
        p = random_probs(rng, 8, 4, sharp=1.5)
        plan = semi_relaxed_ot(p, SolverConfig(epsilon=0.1, gamma=0.5, **TIGHT))
        ref = oracle_solve(p, 0.5, 0.1, iters=100_000, tol=1e-15)
        a = srot_objective(plan, p, 0.5, 0.1)
        b = srot_objective(ref, p, 0.5, 0.1)
        assert abs(a - b) <= 1e-5 * abs(b)

    def test_rows_exact(self):
        rng = np.random.default_rng(9)
        p = random_probs(rng, 50, 7, sharp=3.0)
        for eps in (0.01, 0.05, 0.5):
            plan = semi_relaxed_ot(p, SolverConfig(epsilon=eps, gamma=0.3))
            np.testing.assert_allclose(plan.values.sum(1), 1.0, atol=1e-9)
            assert np.all(plan.values >= 0)

    def test_log_and_linear_agree(self):
        rng = np.random.default_rng(10)
        p = random_probs(rng, 12, 4)
        lin = semi_relaxed_ot(p, SolverConfig(epsilon=0.1, gamma=0.5, log_domain=False, **TIGHT))
        log = semi_relaxed_ot(p, SolverConfig(epsilon=0.1, gamma=0.5, log_domain=True, **TIGHT))
        np.testing.assert_allclose(lin.values, log.values, atol=1e-10)

    def test_underflow_in_linear_domain(self):
        p = np.array([[1 - 1e-12, 1e-12], [1 - 1e-12, 1e-12]])
        with pytest.raises(NumericUnderflow):
            semi_relaxed_ot(p, SolverConfig(epsilon=0.01, gamma=1.0, log_domain=False))

    def test_custom_marginals_validated(self):
        p = np.full((3, 2), 0.5)
        with pytest.raises(InvalidSupport):
            semi_relaxed_ot(p, SolverConfig(), MarginalPair(np.full(3, 1 / 3), np.array([0.7, 0.7])))

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        p = random_probs(rng, 40, 5)
        cfg = SolverConfig(epsilon=0.05, gamma=0.5)
        a, b = semi_relaxed_ot(p, cfg), semi_relaxed_ot(p.copy(), cfg)
        assert np.array_equal(a.values, b.values)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        p = random_probs(rng, 15, 4)
        nu = rng.dirichlet(np.ones(4) * 3)
        cfg = SolverConfig(epsilon=0.1, gamma=0.5, **TIGHT)
        base = semi_relaxed_ot(p, cfg, MarginalPair(np.full(15, 1 / 15), nu)).values
        rows = rng.permutation(15)
        cols = rng.permutation(4)
        moved = semi_relaxed_ot(p[rows][:, cols], cfg, MarginalPair(np.full(15, 1 / 15), nu[cols])).values
        np.testing.assert_allclose(moved, base[rows][:, cols], atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(1, 12), st.integers(1, 6),
        st.floats(0.05, 3.0), st.integers(0, 2**31 - 1),
    )
    def test_gamma_zero_property(self, m, n, eps, seed):
        p = random_probs(np.random.default_rng(seed), m, n)
        plan = semi_relaxed_ot(p, SolverConfig(epsilon=eps, gamma=0.0))
        k = p ** (1 / eps)
        np.testing.assert_allclose(plan.values, k / k.sum(1, keepdims=True), atol=1e-8)

    def test_kl_monotone_in_gamma(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            p = random_probs(rng, 20, 4, sharp=2.0)
            kls = [
                kl_div(semi_relaxed_ot(p, SolverConfig(epsilon=0.1, gamma=g, **TIGHT)).column_marginal(),
                       np.full(4, 0.25))
                for g in (0.01, 0.1, 0.5, 1, 5)
            ]
            assert all(b <= a + 1e-6 for a, b in zip(kls, kls[1:]))


class TestOracle:
    def test_gamma_zero_closed_form(self):
        p = np.array([[0.8, 0.2], [0.6, 0.4]])
        plan = oracle_solve(p, 0.0, 1.0, iters=10)
        np.testing.assert_allclose(plan.values, p, atol=1e-12)

    def test_beats_grid(self):
        rng = np.random.default_rng(15)
        p = random_probs(rng, 2, 2)
        gamma, eps = 0.5, 0.1
        plan = oracle_solve(p, gamma, eps, iters=100_000, tol=1e-15)
        best = srot_objective(plan, p, gamma, eps)
        grid = np.round(np.arange(0, 1.0001, 0.01), 10)
        for s, t in itertools.product(grid, grid):
            q = np.array([[s, 1 - s], [t, 1 - t]])
            assert best <= srot_objective(q, p, gamma, eps) + 1e-12

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            oracle_solve(np.array([[np.inf, 0.0]]), 1.0, 0.1)


class TestBilevel:
    def test_zero_outer_is_balanced(self):
        rng = np.random.default_rng(16)
        p = random_probs(rng, 10, 3)
        cfg = SolverConfig(epsilon=0.1, gamma=0.5)
        a = bilevel_baseline(p, cfg, outer_iters=0).values
        b = sinkhorn_balanced(p, SolverConfig(epsilon=0.1, max_iter=50)).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_reaches_semi_relaxed_objective(self):
        rng = np.random.default_rng(17)
        p = random_probs(rng, 6, 3, sharp=2.0)
        cfg = SolverConfig(epsilon=0.1, gamma=0.5)
        ref = srot_objective(semi_relaxed_ot(p, SolverConfig(epsilon=0.1, gamma=0.5, **TIGHT)), p, 0.5, 0.1)
        got = srot_objective(bilevel_baseline(p, cfg, outer_iters=2000), p, 0.5, 0.1)
        assert abs(got - ref) <= 1e-3

    def test_step_too_large(self):
        rng = np.random.default_rng(18)
        p = random_probs(rng, 10, 3, sharp=3.0)
        with pytest.raises(StepTooLarge):
            bilevel_baseline(p, SolverConfig(epsilon=0.1, gamma=0.5), w_step=1e4, outer_iters=5)
