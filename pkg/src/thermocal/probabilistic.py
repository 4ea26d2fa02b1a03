"""Prior, likelihood, loss and discrepancy threshold.

All log-densities are natural logarithms.  Losses are negative
log-densities: ``S = S_prior + S_like``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg

from .conductivity import ConductivityModel
from .errors import ConfigError, DataError, NumericalError
from .forward import Discretization, SensorProbe, ThermalSetup, solve

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
JITTER = 1e-10


@dataclass(frozen=True)
class SensorErrorModel:
    """Temperature-dependent mean and standard deviation of the sensor error."""

    grid: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        for name in ("grid", "mean", "std"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.grid.size == self.mean.size == self.std.size) or self.grid.size < 1:
            raise ConfigError("error-model grid, mean and std must have equal, non-zero length")
        if np.any(np.diff(self.grid) <= 0):
            raise ConfigError("error-model grid must be strictly increasing")
        if np.any(self.std <= 0):
            raise ConfigError("error-model std must be positive")

    def at(self, T):
        """Mean and std at temperature(s) ``T`` by linear interpolation."""
        return np.interp(T, self.grid, self.mean), np.interp(T, self.grid, self.std)

    def scaled(self, mean_factor=1.0, std_factor=1.0) -> "SensorErrorModel":
        return SensorErrorModel(self.grid, self.mean * mean_factor, self.std * std_factor)

    @classmethod
    def from_csv(cls, path) -> "SensorErrorModel":
        """Read a ``temp_C,mean_C,std_C`` table."""
        path = Path(path)
        try:
            with path.open(newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DataError(f"cannot read error curve {path}: {exc}") from exc
        try:
            cols = [[float(r[c]) for r in rows] for c in ("temp_C", "mean_C", "std_C")]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: expected columns temp_C,mean_C,std_C ({exc})") from exc
        try:
            return cls(*cols)
        except ConfigError as exc:
            raise DataError(f"{path}: {exc}") from exc

    def to_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["temp_C", "mean_C", "std_C"])
            for row in zip(self.grid, self.mean, self.std):
                w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian-process prior on knot conductivities.

    ``length_scale=None`` means one third of the knot temperature range.
    """

    mu_k: float = 0.3
    sigma_k: float = 0.03
    length_scale: Optional[float] = None

    def __post_init__(self):
        if not self.sigma_k > 0:
            raise ConfigError("sigma_k must be positive")
        if self.length_scale is not None and not self.length_scale > 0:
            raise ConfigError("length_scale must be positive")

    def resolved_length(self, knots) -> float:
        if self.length_scale is not None:
            return float(self.length_scale)
        span = float(np.max(knots) - np.min(knots))
        if not span > 0:
            raise ConfigError("cannot derive a length scale from a single knot")
        return span / 3.0


@dataclass(frozen=True)
class LossBreakdown:
    s_prior: float
    s_like: float

    @property
    def s_total(self) -> float:
        return self.s_prior + self.s_like

    def to_dict(self) -> dict:
        return {"s_prior": self.s_prior, "s_like": self.s_like, "s_total": self.s_total}


def prior_covariance(spec: PriorSpec, knots) -> np.ndarray:
    """Squared-exponential covariance between knot temperatures (no jitter)."""
    knots = np.asarray(knots, dtype=float).reshape(-1)
    if knots.size == 0:
        raise ConfigError("no knots")
    ell = spec.resolved_length(knots) if knots.size > 1 else 1.0
    diff = (knots[:, None] - knots[None, :]) / ell
    return spec.sigma_k ** 2 * np.exp(-0.5 * diff ** 2)


class GaussianPrior:
    """Factorised prior N(mu_k 1, Sigma_k + jitter) for repeated evaluation."""

    def __init__(self, spec: PriorSpec, knots):
        self.spec = spec
        self.knots = np.asarray(knots, dtype=float).reshape(-1)
        cov = prior_covariance(spec, self.knots)
        cov = cov + JITTER * spec.sigma_k ** 2 * np.eye(self.knots.size)
        try:
            self.chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError("prior covariance is not positive definite") from exc
        self.cov = cov
        self.mean = np.full(self.knots.size, spec.mu_k)
        self.log_norm = np.sum(np.log(np.diag(self.chol))) + self.knots.size * LOG_SQRT_2PI

    def _check(self, p):
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.size != self.knots.size:
            raise ConfigError(f"parameter vector has {p.size} entries, expected {self.knots.size}")
        return p

    def logpdf(self, p) -> float:
        z = linalg.solve_triangular(self.chol, self._check(p) - self.mean, lower=True)
        return float(-0.5 * z @ z - self.log_norm)

    def grad(self, p) -> np.ndarray:
        r = self._check(p) - self.mean
        return -linalg.cho_solve((self.chol, True), r)

    def draw(self, rng) -> np.ndarray:
        return self.mean + self.chol @ rng.standard_normal(self.knots.size)

    def precision(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(self.knots.size))


def log_prior(p, spec: PriorSpec, knots) -> float:
    return GaussianPrior(spec, knots).logpdf(p)


def log_prior_grad(p, spec: PriorSpec, knots) -> np.ndarray:
    return GaussianPrior(spec, knots).grad(p)


def _error_moments(error_model, measured):
    mu, sigma = error_model.at(np.asarray(measured, dtype=float))
    if np.any(~(sigma > 0)):
        raise NumericalError("error-model std is not positive at some measured temperature")
    return mu, sigma


def gaussian_loglik(residuals, mu, sigma) -> float:
    z = (np.asarray(residuals) - mu) / sigma
    return float(-0.5 * z @ z - np.sum(np.log(sigma)) - z.size * LOG_SQRT_2PI)


def log_likelihood(residuals, error_model: SensorErrorModel, measured_temps) -> float:
    """Independent Gaussian log-density of ``d - f`` with mean/std read at ``d``."""
    residuals = np.asarray(residuals, dtype=float).reshape(-1)
    measured = np.asarray(measured_temps, dtype=float).reshape(-1)
    if residuals.shape != measured.shape:
        raise ConfigError("residuals and measured temperatures differ in length")
    mu, sigma = _error_moments(error_model, measured)
    return gaussian_loglik(residuals, mu, sigma)


def morozov_threshold(error_model: SensorErrorModel, measured_temps, gamma: float) -> float:
    """S_like at residuals exactly (1 + gamma) standard deviations off the bias."""
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    _, sigma = _error_moments(error_model, np.asarray(measured_temps, dtype=float).reshape(-1))
    return float(np.sum(np.log(sigma)) + sigma.size * LOG_SQRT_2PI + 0.5 * sigma.size * (1 + gamma) ** 2)


class PosteriorProblem:
    """Loss ``S(p; n_e, n_t, n_s)`` for one dataset, mesh and model shape.

    Caches everything that does not depend on ``p``: the sensor probe, the
    per-reading error moments and the prior factorisation.
    """

    def __init__(self, dataset, setup: ThermalSetup, disc: Discretization, shape: ConductivityModel,
                 prior: PriorSpec = PriorSpec(), error_model: Optional[SensorErrorModel] = None):
        self.dataset = dataset
        self.setup = setup
        self.disc = disc
        self.shape = shape
        self.prior_spec = prior
        self.error_model = error_model if error_model is not None else dataset.error_model
        if self.error_model is None:
            raise ConfigError("no sensor error model supplied")
        self.d = dataset.d
        self.probe = SensorProbe(setup, disc, dataset.times)
        self.mu, self.sigma = _error_moments(self.error_model, self.d)
        self.prior = GaussianPrior(prior, shape.knots)
        self.n_eval = 0
        self._ll_cache = {}

    @property
    def n_p(self) -> int:
        return self.shape.n_s + 1

    @property
    def n_d(self) -> int:
        return self.d.size

    def model(self, p) -> ConductivityModel:
        return self.shape.with_values(p)

    def predict(self, p) -> np.ndarray:
        self.n_eval += 1
        return self.probe(solve(self.setup, self.model(p), self.disc))

    def s_like_from_prediction(self, f) -> float:
        return -gaussian_loglik(self.d - f, self.mu, self.sigma)

    def __call__(self, p) -> LossBreakdown:
        p = np.asarray(p, dtype=float)
        s_prior = -self.prior.logpdf(p)
        return LossBreakdown(s_prior, self.s_like_from_prediction(self.predict(p)))

    def log_posterior(self, p):
        """``(-S, -S_like)``, the form the sampler stores for DIC."""
        value = self(p)
        return -value.s_total, -value.s_like

    def log_likelihood(self, p) -> float:
        key = np.asarray(p, dtype=float).tobytes()
        if key not in self._ll_cache:
            self._ll_cache[key] = -self.s_like_from_prediction(self.predict(p))
        return self._ll_cache[key]

    def weighted_residuals(self, f) -> np.ndarray:
        return (self.d - f - self.mu) / self.sigma

    def derivatives(self, p, rel_step: float = 1e-6, executor=None):
        """Gradient and Gauss-Newton Hessian of ``S`` at ``p``.

        The prediction Jacobian comes from central differences, so each
        call costs ``2 n_p + 1`` forward solves.
        """
        p = np.asarray(p, dtype=float)
        h = rel_step * np.maximum(np.abs(p), 1e-3)
        probes = [p]
        for i in range(p.size):
            for sgn in (1.0, -1.0):
                q = p.copy()
                q[i] += sgn * h[i]
                probes.append(q)
        mapper = executor.map if executor is not None else map
        preds = list(mapper(self.predict, probes))
        f0 = preds[0]
        J = np.column_stack([(preds[1 + 2 * i] - preds[2 + 2 * i]) / (2 * h[i]) for i in range(p.size)])
        r = self.weighted_residuals(f0)
        Jw = J / self.sigma[:, None]
        grad = -Jw.T @ r - self.prior.grad(p)
        hess = Jw.T @ Jw + self.prior.precision()
        value = LossBreakdown(-self.prior.logpdf(p), self.s_like_from_prediction(f0))
        return value, grad, hess


def loss(p, dataset, setup: ThermalSetup, disc: Discretization, k_model_shape: ConductivityModel,
         prior: PriorSpec = PriorSpec(), error_model: Optional[SensorErrorModel] = None) -> LossBreakdown:
    """One-off evaluation of ``S = S_prior + S_like`` at ``p``."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise ConfigError("conductivities must be positive")
    try:
        return PosteriorProblem(dataset, setup, disc, k_model_shape, prior, error_model)(p)
    except NumericalError as exc:
        raise NumericalError(f"loss at n_e={disc.n_e}, n_t={disc.n_t}: {exc}") from exc
