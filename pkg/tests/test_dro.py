"""Tests for the robust dual solver and the Gibbs tilt.

The solver is checked against an independent 1-D oracle (dense log-grid
plus golden-section refinement) and against finite differences of the
dual objective, never against its own internals.
"""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from protodro.dro import (
    DroConfig,
    GibbsPosterior,
    decide,
    dual_objective,
    gibbs_tilt,
    gibbs_tilt_batch,
    robust_logit_grad,
    robust_logits,
    solve_dual,
    solve_dual_batch,
)
from protodro.numkit import log_sum_exp
from protodro.priors import MixturePrior

from oracles import central_difference, dual_value_oracle, solve_dual_oracle


def uniform_logw(n_atoms):
    return np.full(n_atoms, -np.log(n_atoms))


def random_instance(rng, n_atoms=None, with_holes=False):
    """One (log_weights, scores) pair with spread scores."""
    if n_atoms is None:
        n_atoms = int(rng.integers(2, 41))
    w = rng.dirichlet(np.ones(n_atoms))
    logw = np.log(w)
    if with_holes and n_atoms > 3:
        dead = rng.choice(n_atoms, size=n_atoms // 4, replace=False)
        logw[dead] = -np.inf
        logw = logw - log_sum_exp(logw)
    scale = float(rng.choice([0.3, 1.0, 3.0]))
    scores = scale * rng.standard_normal(n_atoms)
    return logw, scores


def make_prior(atoms, log_weights=None):
    """Minimal single-component prior wrapper around explicit atoms."""
    atoms = np.asarray(atoms, dtype=float)
    n_atoms, dim = atoms.shape
    if log_weights is None:
        log_weights = uniform_logw(n_atoms)
    from protodro.numkit import GaussianParams

    comp = GaussianParams(mean=np.zeros(dim), cov=np.eye(dim))
    return MixturePrior(
        class_id=0,
        weights=np.array([1.0]),
        components=[comp],
        atoms=atoms,
        atom_log_weights=np.asarray(log_weights, dtype=float),
    )


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            DroConfig(rho=-0.1)
        with pytest.raises(ValueError):
            DroConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            DroConfig(newton_iters=0)
        with pytest.raises(ValueError):
            DroConfig(lambda_min=1.0, lambda_max=0.5)
        with pytest.raises(ValueError):
            DroConfig(lambda_init=1e-9)

    def test_grad_tol_scales_with_rho(self):
        assert DroConfig(rho=0.0).grad_tol == pytest.approx(1e-8)
        assert DroConfig(rho=4.0).grad_tol == pytest.approx(5e-8)


class TestGibbsTilt:
    def test_equidistant_atoms_get_equal_weight(self):
        prior = make_prior([[1.0, 0.0], [-1.0, 0.0]])
        tilt = gibbs_tilt(prior, np.zeros(2), epsilon=0.7)
        np.testing.assert_allclose(np.exp(tilt.tilt_log_weights), [0.5, 0.5])

    def test_near_atom_dominates_at_small_epsilon(self):
        prior = make_prior([[0.0], [1.0]])
        tilt = gibbs_tilt(prior, np.array([0.05]), epsilon=0.01)
        w = np.exp(tilt.tilt_log_weights)
        assert w[0] > 1.0 - 1e-12

    def test_prior_weights_carry_through(self):
        # equidistant atoms, so the tilt must reproduce the prior weights
        logw = np.log([0.8, 0.2])
        prior = make_prior([[1.0], [-1.0]], log_weights=logw)
        tilt = gibbs_tilt(prior, np.zeros(1), epsilon=1.3)
        np.testing.assert_allclose(np.exp(tilt.tilt_log_weights), [0.8, 0.2])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        prior = make_prior(rng.standard_normal((9, 3)))
        queries = rng.standard_normal((5, 3))
        batch = gibbs_tilt_batch(prior, queries, epsilon=0.9)
        for i in range(5):
            single = gibbs_tilt(prior, queries[i], epsilon=0.9)
            # batched and single-row matmuls may take different BLAS paths
            np.testing.assert_allclose(
                batch[i], single.tilt_log_weights, rtol=1e-13, atol=1e-13
            )

    def test_rows_normalized(self):
        rng = np.random.default_rng(11)
        prior = make_prior(rng.standard_normal((14, 4)))
        logs = gibbs_tilt_batch(prior, rng.standard_normal((6, 4)), epsilon=2.0)
        np.testing.assert_allclose(log_sum_exp(logs, axis=1), np.zeros(6), atol=1e-12)

    def test_rejects_bad_inputs(self):
        prior = make_prior([[0.0, 0.0]])
        with pytest.raises(ValueError):
            gibbs_tilt_batch(prior, np.zeros((2, 3)), epsilon=1.0)
        with pytest.raises(ValueError):
            gibbs_tilt_batch(prior, np.zeros((2, 2)), epsilon=0.0)


class TestDualObjective:
    def test_constant_scores_closed_form(self):
        q = GibbsPosterior(uniform_logw(4), atom_scores=np.full(4, 2.5))
        cfg = DroConfig(rho=1.5, epsilon=0.8)
        for lam in [0.1, 1.0, 7.0]:
            phi, dphi, d2phi = dual_objective(q, lam, cfg)
            assert phi == pytest.approx(lam * 1.5 + 2.5, rel=1e-12)
            assert dphi == pytest.approx(1.5, rel=1e-12)
            assert d2phi == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_oracle_value(self):
        rng = np.random.default_rng(23)
        cfg = DroConfig(rho=1.0, epsilon=1.0)
        for _ in range(20):
            logw, scores = random_instance(rng)
            lam = float(rng.uniform(0.05, 5.0))
            q = GibbsPosterior(logw, atom_scores=scores)
            phi, _, _ = dual_objective(q, lam, cfg)
            ref = dual_value_oracle(logw, scores, lam, cfg.rho, cfg.epsilon)
            assert phi == pytest.approx(ref, rel=1e-10)

    def test_first_derivative_matches_fd(self):
        rng = np.random.default_rng(31)
        cfg = DroConfig(rho=0.7, epsilon=1.3)
        for _ in range(20):
            logw, scores = random_instance(rng)
            lam = float(rng.uniform(0.2, 4.0))
            q = GibbsPosterior(logw, atom_scores=scores)
            _, dphi, _ = dual_objective(q, lam, cfg)
            fd = central_difference(
                lambda t: dual_objective(q, t, cfg)[0], lam, h=1e-6 * lam
            )
            assert dphi == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_second_derivative_matches_fd(self):
        rng = np.random.default_rng(37)
        cfg = DroConfig(rho=1.0, epsilon=0.9)
        for _ in range(20):
            logw, scores = random_instance(rng)
            lam = float(rng.uniform(0.2, 4.0))
            q = GibbsPosterior(logw, atom_scores=scores)
            _, _, d2phi = dual_objective(q, lam, cfg)
            fd = central_difference(
                lambda t: dual_objective(q, t, cfg)[1], lam, h=1e-5 * lam
            )
            assert d2phi == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_rejects_unset_scores_and_bad_lambda(self):
        q = GibbsPosterior(uniform_logw(3))
        with pytest.raises(ValueError):
            dual_objective(q, 1.0, DroConfig())
        q.atom_scores = np.zeros(3)
        with pytest.raises(ValueError):
            dual_objective(q, 0.0, DroConfig())


class TestSolveDual:
    def test_canonical_instance_matches_frozen_oracle(self):
        # three uniform atoms with scores 0, 1, 2 at rho = eps = 1;
        # constants frozen from the grid + golden-section oracle and
        # cross-checked against a 40-digit mpmath golden section
        q = GibbsPosterior(uniform_logw(3), atom_scores=np.array([0.0, 1.0, 2.0]))
        res = solve_dual(q, DroConfig(rho=1.0, epsilon=1.0))
        assert res.converged
        assert not res.degenerate
        assert res.at_boundary is None
        assert res.lambda_star == pytest.approx(0.2545528355, rel=1e-3)
        assert res.value == pytest.approx(1.9799540155, rel=1e-4)
        assert res.iterations <= 8

    def test_matches_grid_oracle_on_random_instances(self):
        rng = np.random.default_rng(101)
        for k in range(25):
            logw, scores = random_instance(rng, with_holes=(k % 3 == 0))
            rho = float(rng.choice([0.3, 1.0, 2.0]))
            eps = float(rng.choice([0.5, 1.0, 2.0]))
            cfg = DroConfig(rho=rho, epsilon=eps)
            res = solve_dual(GibbsPosterior(logw, atom_scores=scores), cfg)
            lam_ref, val_ref = solve_dual_oracle(logw, scores, rho, eps)
            assert res.converged
            assert res.value == pytest.approx(val_ref, rel=1e-4)
            if res.at_boundary is None:
                assert res.lambda_star == pytest.approx(lam_ref, rel=1e-3)

    def test_degenerate_constant_scores(self):
        logw = np.log([0.3, 0.5, 0.2])
        q = GibbsPosterior(logw, atom_scores=np.full(3, 2.5))
        res = solve_dual(q, DroConfig())
        assert res.degenerate
        assert res.converged
        assert res.value == 2.5
        assert res.lambda_star == 0.0
        assert res.iterations == 0
        np.testing.assert_array_equal(res.posterior, np.exp(logw))

    def test_near_constant_scores_short_circuit(self):
        scores = 4.0 + 1e-15 * np.arange(3)
        res = solve_dual(GibbsPosterior(uniform_logw(3), atom_scores=scores), DroConfig())
        assert res.degenerate
        assert res.value == pytest.approx(4.0)

    def test_boundary_min_when_top_atom_carries_enough_mass(self):
        # phi'(0+) = rho + eps * log(mass at the max score); with mass 0.9
        # and rho = 5 the slope is positive everywhere, so the minimizer
        # clamps to lambda_min and the value sits just above the max score
        logw = np.log([0.9, 0.1])
        scores = np.array([1.0, 0.0])
        cfg = DroConfig(rho=5.0, epsilon=1.0)
        res = solve_dual(GibbsPosterior(logw, atom_scores=scores), cfg)
        assert res.at_boundary == "min"
        assert res.converged
        assert res.lambda_star == cfg.lambda_min
        assert res.value >= 1.0 - 1e-12
        assert res.value == pytest.approx(1.0, abs=1e-4)

    def test_boundary_max_when_rho_zero(self):
        # rho = 0 makes phi strictly decreasing toward the mean score, so
        # the box clamps at lambda_max and the value approaches E_q[f]
        logw = np.log([0.25, 0.75])
        scores = np.array([2.0, -1.0])
        cfg = DroConfig(rho=0.0, epsilon=1.0)
        res = solve_dual(GibbsPosterior(logw, atom_scores=scores), cfg)
        assert res.at_boundary == "max"
        assert res.converged
        assert res.lambda_star == cfg.lambda_max
        mean = float(np.exp(logw) @ scores)
        assert res.value == pytest.approx(mean, abs=1e-3)
        assert res.value >= mean

    def test_value_between_mean_and_max(self):
        rng = np.random.default_rng(211)
        cfg = DroConfig(rho=0.8, epsilon=1.1)
        for _ in range(15):
            logw, scores = random_instance(rng)
            res = solve_dual(GibbsPosterior(logw, atom_scores=scores), cfg)
            mean = float(np.exp(logw) @ scores)
            assert res.value >= mean - 1e-10
            assert res.value <= scores.max() + cfg.lambda_min * (cfg.rho + 1.0)

    def test_value_nondecreasing_in_rho(self):
        rng = np.random.default_rng(223)
        for _ in range(10):
            logw, scores = random_instance(rng)
            values = [
                solve_dual(
                    GibbsPosterior(logw, atom_scores=scores),
                    DroConfig(rho=rho, epsilon=1.0),
                ).value
                for rho in [0.1, 0.5, 1.0, 2.0, 5.0]
            ]
            assert all(b >= a - 1e-10 for a, b in zip(values, values[1:]))

    def test_value_slope_in_rho_is_lambda_star(self):
        rng = np.random.default_rng(227)
        checked = 0
        for _ in range(12):
            logw, scores = random_instance(rng, n_atoms=12)
            res = solve_dual(
                GibbsPosterior(logw, atom_scores=scores), DroConfig(rho=0.6, epsilon=1.0)
            )
            if res.at_boundary is not None:
                continue

            def value_at(rho):
                return solve_dual(
                    GibbsPosterior(logw, atom_scores=scores),
                    DroConfig(rho=rho, epsilon=1.0),
                ).value

            fd = central_difference(value_at, 0.6, h=1e-5)
            assert fd == pytest.approx(res.lambda_star, rel=1e-3)
            checked += 1
        assert checked >= 5

    @given(st.integers(0, 2**32 - 1))
    def test_midpoint_convexity(self, seed):
        rng = np.random.default_rng(seed)
        logw, scores = random_instance(rng, n_atoms=int(rng.integers(2, 12)))
        cfg = DroConfig(rho=float(rng.uniform(0.1, 3.0)), epsilon=float(rng.uniform(0.3, 2.0)))
        q = GibbsPosterior(logw, atom_scores=scores)
        a = float(rng.uniform(1e-3, 5.0))
        b = float(rng.uniform(1e-3, 5.0))
        phi_a = dual_objective(q, a, cfg)[0]
        phi_b = dual_objective(q, b, cfg)[0]
        phi_m = dual_objective(q, 0.5 * (a + b), cfg)[0]
        scale = max(1.0, abs(phi_a), abs(phi_b))
        assert phi_m <= 0.5 * (phi_a + phi_b) + 1e-9 * scale

    def test_posterior_rows_are_distributions(self):
        rng = np.random.default_rng(307)
        logw = np.vstack([random_instance(rng, n_atoms=10, with_holes=True)[0] for _ in range(6)])
        scores = rng.standard_normal((6, 10))
        batch = solve_dual_batch(logw, scores, DroConfig())
        assert np.all(batch.posterior >= 0)
        np.testing.assert_allclose(batch.posterior.sum(axis=1), np.ones(6), atol=1e-10)
        assert np.all(batch.posterior[logw == -np.inf] == 0)

    def test_batch_matches_scalar_rows(self):
        rng = np.random.default_rng(311)
        n, n_atoms = 12, 15
        logw = np.vstack([random_instance(rng, n_atoms=n_atoms)[0] for _ in range(n)])
        scores = rng.standard_normal((n, n_atoms))
        scores[3] = 1.25  # one degenerate row inside the batch
        cfg = DroConfig(rho=0.9, epsilon=0.8)
        batch = solve_dual_batch(logw, scores, cfg)
        for i in range(n):
            single = solve_dual(GibbsPosterior(logw[i], atom_scores=scores[i]), cfg)
            assert batch.value[i] == single.value
            assert batch.lambda_star[i] == single.lambda_star
            np.testing.assert_array_equal(batch.posterior[i], single.posterior)
            assert batch.iterations[i] == single.iterations
        assert batch.degenerate[3]

    def test_shared_scores_broadcast(self):
        rng = np.random.default_rng(313)
        logw = np.vstack([random_instance(rng, n_atoms=8)[0] for _ in range(4)])
        scores = rng.standard_normal(8)
        shared = solve_dual_batch(logw, scores, DroConfig())
        tiled = solve_dual_batch(logw, np.tile(scores, (4, 1)), DroConfig())
        np.testing.assert_array_equal(shared.value, tiled.value)

    def test_iterations_respect_budget(self):
        rng = np.random.default_rng(317)
        logw = np.vstack([random_instance(rng, n_atoms=20)[0] for _ in range(30)])
        scores = 3.0 * rng.standard_normal((30, 20))
        cfg = DroConfig(newton_iters=8)
        batch = solve_dual_batch(logw, scores, cfg)
        assert np.all(batch.iterations <= 8)
        assert np.all(batch.converged)

    def test_rejects_bad_inputs(self):
        cfg = DroConfig()
        with pytest.raises(ValueError):
            solve_dual_batch(np.zeros(3), np.zeros(3), cfg)
        with pytest.raises(ValueError):
            solve_dual_batch(np.zeros((2, 3)), np.zeros(4), cfg)
        with pytest.raises(ValueError):
            solve_dual_batch(np.zeros((2, 3)), np.array([1.0, np.inf, 0.0]), cfg)
        all_dead = np.full((1, 3), -np.inf)
        with pytest.raises(ValueError):
            solve_dual_batch(all_dead, np.zeros(3), cfg)
        q = GibbsPosterior(uniform_logw(3))
        with pytest.raises(ValueError):
            solve_dual(q, cfg)


class TestRobustLogits:
    def test_close_high_scoring_class_wins(self):
        rng = np.random.default_rng(401)
        x = np.zeros(2)
        near = make_prior(0.3 * rng.standard_normal((16, 2)))
        far = make_prior(0.3 * rng.standard_normal((16, 2)) + 6.0)

        def score_fn(class_id, atoms):
            # class 0 scores high near the origin, class 1 does not
            base = -np.sum(atoms**2, axis=1)
            return base + (2.0 if class_id == 0 else -2.0)

        values, results = robust_logits([near, far], x, score_fn, DroConfig())
        assert values[0] > values[1]
        assert len(results) == 2
        assert all(r.converged for r in results)

    def test_decide_breaks_ties_low(self):
        assert decide(np.array([3.0, 3.0, 1.0])) == 0
        assert decide(np.array([0.0, 2.0, 2.0])) == 1

    def test_envelope_gradient_matches_fd(self):
        rng = np.random.default_rng(409)
        dim = 4
        cfg = DroConfig(rho=0.7, epsilon=1.0)
        for _ in range(6):
            atoms = rng.standard_normal((10, dim))
            logw = np.log(rng.dirichlet(np.ones(10)))
            theta = rng.standard_normal(dim)

            def value_at(t):
                q = GibbsPosterior(logw, atom_scores=atoms @ t)
                return solve_dual(q, cfg).value

            res = solve_dual(GibbsPosterior(logw, atom_scores=atoms @ theta), cfg)
            grad = robust_logit_grad(res, atoms)
            for k in range(dim):
                def slice_k(t_k, k=k):
                    t = theta.copy()
                    t[k] = t_k
                    return value_at(t)

                fd = central_difference(slice_k, theta[k], h=1e-6)
                assert grad[k] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_envelope_gradient_degenerate_uses_tilt(self):
        logw = np.log([0.6, 0.4])
        res = solve_dual(GibbsPosterior(logw, atom_scores=np.zeros(2)), DroConfig())
        grads = np.array([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(robust_logit_grad(res, grads), [0.6, 0.4])

    def test_gradient_shape_check(self):
        res = solve_dual(
            GibbsPosterior(uniform_logw(3), atom_scores=np.array([0.0, 1.0, 2.0])),
            DroConfig(),
        )
        with pytest.raises(ValueError):
            robust_logit_grad(res, np.zeros((4, 2)))
