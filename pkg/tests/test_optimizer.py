import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermocal.conductivity import ConductivityModel
from thermocal.errors import ConfigError
from thermocal.forward import Discretization
from thermocal.optimizer import (K_FLOOR, OptimizerConfig, fd_gradient, fd_hessian, map_estimate,
                                 trust_region_step)
from thermocal.probabilistic import GaussianPrior, PosteriorProblem, PriorSpec


def quadratic(A, a):
    return lambda p: 0.5 * (p - a) @ A @ (p - a)


def test_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(abs_tol=0.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(max_iters=0)


def test_fd_derivatives_of_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    a = np.array([0.5, 1.5])
    f = quadratic(A, a)
    p = np.array([1.0, 1.0])
    np.testing.assert_allclose(fd_gradient(f, p), A @ (p - a), rtol=1e-7)
    np.testing.assert_allclose(fd_hessian(f, p), A, rtol=1e-5)


def test_trust_region_step_interior_and_boundary():
    H = np.diag([2.0, 4.0])
    g = np.array([-2.0, -4.0])
    np.testing.assert_allclose(trust_region_step(g, H, 10.0), [1.0, 1.0])
    s = trust_region_step(g, H, 0.5)
    assert np.linalg.norm(s) == pytest.approx(0.5, rel=1e-9)
    s = trust_region_step(np.array([0.0, 1.0]), np.diag([-1.0, 1.0]), 0.3)
    assert np.linalg.norm(s) == pytest.approx(0.3, rel=1e-9)


def test_quadratic_converges_in_few_iterations(rng):
    M = rng.normal(size=(3, 3))
    A = M @ M.T + 3 * np.eye(3)
    a = np.array([0.4, 1.2, 0.8])
    res = map_estimate(quadratic(A, a), np.array([1.0, 1.0, 1.0]),
                       OptimizerConfig(initial_trust_radius=5.0, abs_tol=1e-6, rel_tol=1e-6))
    np.testing.assert_allclose(res.p, a, atol=1e-5)
    assert res.iterations <= 3
    assert res.converged


def test_pure_prior_converges_to_prior_mean():
    prior = GaussianPrior(PriorSpec(), np.linspace(20, 50, 5))
    res = map_estimate(lambda p: -prior.logpdf(p), np.array([0.25, 0.35, 0.3, 0.2, 0.4]),
                       OptimizerConfig(abs_tol=1e-8, rel_tol=1e-8))
    np.testing.assert_allclose(res.p, 0.3, atol=1e-5)


def test_positivity_floor():
    res = map_estimate(quadratic(np.eye(2), np.array([-1.0, 0.5])), np.array([0.2, 0.2]),
                       OptimizerConfig(initial_trust_radius=1.0))
    assert np.all(res.p >= K_FLOOR)
    assert res.p[0] == pytest.approx(K_FLOOR)
    with pytest.raises(ConfigError):
        map_estimate(quadratic(np.eye(2), np.zeros(2)), np.array([0.0, 1.0]))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.05, 3.0), min_size=2, max_size=4),
       st.lists(st.floats(0.5, 5.0), min_size=4, max_size=4))
def test_never_worse_than_start(target, scales):
    a = np.array(target)
    A = np.diag(scales[: a.size])
    f = lambda p: 0.5 * (p - a) @ A @ (p - a) + 0.1 * np.sum((p - a) ** 4)
    p0 = np.full(a.size, 1.0)
    res = map_estimate(f, p0)
    assert res.loss.s_total <= f(p0) + 1e-12


def test_looser_tolerance_never_needs_more_iterations():
    a = np.array([0.7, 0.2, 1.4])
    f = lambda p: np.sum((p - a) ** 2 * np.array([1.0, 4.0, 0.5])) + np.sum((p - a) ** 4)
    p0 = np.array([0.3, 0.3, 0.3])
    for tol in (1e-4, 1e-3, 1e-2):
        tight = map_estimate(f, p0, OptimizerConfig(abs_tol=tol, rel_tol=tol))
        loose = map_estimate(f, p0, OptimizerConfig(abs_tol=10 * tol, rel_tol=10 * tol))
        assert loose.iterations <= tight.iterations


@pytest.fixture(scope="module")
def ns1_problem(setup, small_synthetic):
    shape = ConductivityModel(small_synthetic.T_min, small_synthetic.T_max, [0.3, 0.3])
    return PosteriorProblem(small_synthetic, setup, Discretization(16, 256), shape)


def test_gauss_newton_gradient_matches_central_differences(ns1_problem, rng):
    problem = ns1_problem
    for _ in range(3):
        p = rng.uniform(0.25, 0.35, 2)
        _, grad, _ = problem.derivatives(p)
        fd = fd_gradient(lambda q: problem(q).s_total, p, 1e-6)
        np.testing.assert_allclose(grad, fd, rtol=1e-4)


def test_ns1_map_agrees_with_grid_search(ns1_problem):
    res = map_estimate(ns1_problem, np.array([0.3, 0.3]), OptimizerConfig(abs_tol=1e-5, rel_tol=1e-5))
    k1 = np.linspace(0.15, 0.45, 50)
    k2 = np.linspace(0.15, 0.45, 50)
    grid = np.array([[ns1_problem([a, b]).s_total for b in k2] for a in k1])
    i, j = np.unravel_index(np.argmin(grid), grid.shape)
    assert abs(k1[i] - res.p[0]) <= k1[1] - k1[0]
    assert abs(k2[j] - res.p[1]) <= k2[1] - k2[0]
    assert res.loss.s_total <= grid.min() + 1e-6 * abs(grid.min())
