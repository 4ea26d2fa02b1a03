import numpy as np
import pytest
from scipy import stats

from thermocal.errors import ConfigError, DataError, NumericalError
from thermocal.mcmc import (ChainConfig, PosteriorChain, autocorrelation, band_distance,
                            credible_band, effective_sample_size, geweke, interpolation_matrix,
                            load_chain, multi_chain_run, sample, save_chain)


def gaussian_target(mean, cov):
    prec = np.linalg.inv(cov)
    return lambda p: -0.5 * (p - mean) @ prec @ (p - mean)


def ar1(n, phi, rng):
    x = np.empty(n)
    x[0] = rng.standard_normal() / np.sqrt(1 - phi ** 2)
    e = rng.standard_normal(n)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    return x


@pytest.mark.parametrize("kw", [dict(n_samples=1), dict(n_samples=10, burn_in=10),
                                dict(target_acceptance=1.0), dict(decay=0.4),
                                dict(initial_proposal_std=-1.0)])
def test_chain_config_validation(kw):
    with pytest.raises(ConfigError):
        ChainConfig(**kw)


def test_standard_normal_2d():
    mean = np.array([10.0, 10.0])
    cfg = ChainConfig(n_samples=100_000, burn_in=10_000, seed=3, initial_proposal_std=1.0)
    chain = sample(gaussian_target(mean, np.eye(2)), mean, cfg)
    assert np.all(np.abs(chain.mean - mean) < 0.05)
    assert np.linalg.norm(np.cov(chain.kept.T) - np.eye(2)) < 0.1
    assert abs(chain.acceptance_rate - 0.234) < 0.05
    assert 0.0 <= chain.acceptance_rate <= 1.0
    assert np.all(chain.ess <= chain.kept.shape[0])


def test_frozen_tiny_proposal_accepts_everything():
    cfg = ChainConfig(n_samples=2000, burn_in=100, adapt=False, initial_proposal_std=1e-12)
    chain = sample(gaussian_target(np.array([1.0]), np.eye(1)), [1.0], cfg)
    assert chain.acceptance_rate > 0.99


def test_bitwise_reproducible_and_seed_dependent():
    f = gaussian_target(np.array([2.0, 3.0]), np.array([[1.0, 0.5], [0.5, 2.0]]))
    cfg = ChainConfig(n_samples=3000, burn_in=300, seed=11, initial_proposal_std=0.5)
    a, b = sample(f, [2.0, 3.0], cfg), sample(f, [2.0, 3.0], cfg)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.log_posterior, b.log_posterior)
    c = sample(f, [2.0, 3.0], ChainConfig(n_samples=3000, burn_in=300, seed=12, initial_proposal_std=0.5))
    assert not np.array_equal(a.samples, c.samples)


def test_non_positive_proposals_rejected():
    # exponential(1) target: lots of proposals land below zero
    chain = sample(lambda p: -p[0] if p[0] > 0 else -np.inf, [0.5],
                   ChainConfig(n_samples=20_000, burn_in=1000, initial_proposal_std=1.0))
    assert np.all(chain.samples > 0)
    assert chain.mean[0] == pytest.approx(1.0, abs=0.15)


def test_infinite_start_raises():
    with pytest.raises(NumericalError):
        sample(lambda p: -np.inf, [1.0], ChainConfig(n_samples=10, burn_in=0))


def test_histogram_matches_density_chi_square():
    # gamma(3) target on the positive axis, thinned to near-independent draws
    dist = stats.gamma(3.0)
    chain = sample(lambda p: dist.logpdf(p[0]), [3.0],
                   ChainConfig(n_samples=200_000, burn_in=10_000, seed=5, initial_proposal_std=2.0))
    x = chain.kept[::20, 0]
    edges = np.r_[0.0, dist.ppf(np.linspace(0.1, 0.9, 9)), np.inf]
    observed, _ = np.histogram(x, edges)
    expected = np.full(10, x.size / 10)
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_loglik_tuple_is_stored():
    f = lambda p: (-0.5 * float(p @ p), -float(p[0]))
    chain = sample(f, [1.0, 1.0], ChainConfig(n_samples=50, burn_in=5, initial_proposal_std=0.1))
    np.testing.assert_allclose(chain.log_likelihood, -chain.samples[:, 0])
    assert chain.kept_log_likelihood.shape == (45,)


def test_geweke_constant_and_ramp():
    res = geweke(np.full(1000, 3.0))
    assert res.passed
    np.testing.assert_array_equal(res.rel_to_first, 0.0)
    ramp = np.linspace(1.0, 2.0, 10_000)
    res = geweke(ramp)
    assert not res.passed
    m10, m50 = ramp[:1000].mean(), ramp[5000:].mean()
    assert m10 == pytest.approx(1.05, abs=1e-3)
    assert m50 == pytest.approx(1.75, abs=1e-3)
    assert res.rel_to_first[0] > 0.5


def test_geweke_iid_passes(rng):
    assert geweke(rng.normal(5.0, 0.01, 100_000)).passed
    assert geweke(rng.normal(5.0, 0.01, (100_000, 3))).passed


def test_geweke_needs_all_parameters(rng):
    x = rng.normal(5.0, 0.01, (10_000, 2))
    x[:, 1] = np.linspace(1, 2, 10_000)
    assert not geweke(x).passed


def test_autocorrelation_lag_zero():
    rho = autocorrelation(np.sin(np.arange(100.0)))
    assert rho[0] == pytest.approx(1.0)


def test_ess_iid(rng):
    n = 50_000
    assert abs(effective_sample_size(rng.standard_normal(n))[0] - n) < 0.1 * n


def test_ess_ar1(rng):
    n = 100_000
    ess = effective_sample_size(ar1(n, 0.9, rng))[0]
    assert abs(ess - n / 19) < 0.25 * n / 19
    with pytest.raises(DataError):
        effective_sample_size(np.ones(5))


def test_interpolation_matrix_identity_at_knots():
    knots = np.array([1.0, 2.0, 4.0])
    np.testing.assert_allclose(interpolation_matrix(knots, knots), np.eye(3))
    np.testing.assert_allclose(interpolation_matrix(knots, [0.0, 5.0]), [[1, 0, 0], [0, 0, 1]])


def test_band_single_sample_collapses():
    band = credible_band(np.tile([0.3, 0.35, 0.28], (50, 1)), [20.0, 30.0, 40.0])
    np.testing.assert_allclose(band.lower, band.upper)
    np.testing.assert_allclose(band.mean, band.lower)
    assert band.area() == pytest.approx(0.0, abs=1e-14)


def test_band_at_knots_equals_marginal_quantiles(rng):
    x = rng.normal([0.3, 0.32, 0.29], 0.01, (5000, 3))
    knots = np.array([20.0, 35.0, 50.0])
    band = credible_band(x, knots, knots, level=0.99)
    np.testing.assert_allclose(band.lower, np.quantile(x, 0.005, axis=0))
    np.testing.assert_allclose(band.upper, np.quantile(x, 0.995, axis=0))
    assert np.all(band.lower <= band.mean) and np.all(band.mean <= band.upper)
    with pytest.raises(ConfigError):
        credible_band(x, knots, level=1.0)


def test_band_distance(rng):
    x = rng.normal([0.3, 0.32], 0.01, (4000, 2))
    a = credible_band(x, [20.0, 50.0], [20.0, 50.0])
    assert band_distance(a, a) == 0.0
    b = credible_band(x + 0.01, [20.0, 50.0], [20.0, 50.0])
    assert band_distance(a, b) == pytest.approx(1.0, rel=0.05)


def test_multi_chain_single_map_reproduces_sample():
    f = gaussian_target(np.array([1.0, 2.0]), np.eye(2) * 0.1)
    cfg = ChainConfig(n_samples=2000, burn_in=200, seed=7, initial_proposal_std=0.1)
    multi = multi_chain_run(f, 1, "map", cfg, p_map=[1.0, 2.0])
    np.testing.assert_array_equal(multi.chains[0].samples, sample(f, [1.0, 2.0], cfg).samples)
    np.testing.assert_array_equal(multi.pooled, multi.chains[0].kept)


def test_multi_chain_prior_draws_distinct():
    f = gaussian_target(np.array([1.0, 2.0]), np.eye(2) * 0.1)
    cfg = ChainConfig(n_samples=1000, burn_in=100, seed=7, initial_proposal_std=0.1)
    draw = lambda rng: np.array([1.0, 2.0]) + 0.3 * rng.standard_normal(2)
    multi = multi_chain_run(f, 3, "prior", cfg, prior_draw=draw)
    assert len({tuple(s) for s in multi.initial_points}) == 3
    assert not np.array_equal(multi.chains[0].samples, multi.chains[1].samples)
    assert multi.pooled.shape == (2700, 2)
    with pytest.raises(ConfigError):
        multi_chain_run(f, 2, "bogus", cfg)


def test_save_and_load_round_trip(tmp_path):
    f = lambda p: (-0.5 * float(p @ p), -float(p @ p))
    chain = sample(f, [1.0, 1.0], ChainConfig(n_samples=300, burn_in=30, initial_proposal_std=0.3))
    save_chain(chain, tmp_path / "chain.csv", ChainConfig(), {"knots": np.array([1.0, 2.0])})
    back = load_chain(tmp_path / "chain.csv")
    np.testing.assert_array_equal(back.samples, chain.samples)
    np.testing.assert_array_equal(back.log_likelihood, chain.log_likelihood)
    assert back.acceptance_rate == chain.acceptance_rate
    np.testing.assert_array_equal(back.ess, chain.ess)
    with pytest.raises(DataError):
        load_chain(tmp_path / "missing.csv")


def test_short_chain_flags_geweke():
    chain = PosteriorChain(np.ones((5, 2)), 0, 0.5, np.zeros(5))
    assert not chain.geweke_pass
