"""Trust-region Newton minimisation of the loss with finite-difference derivatives."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NumericalError
from .probabilistic import LossBreakdown

log = logging.getLogger(__name__)

K_FLOOR = 1e-4


@dataclass(frozen=True)
class OptimizerConfig:
    abs_tol: float = 1e-2
    rel_tol: float = 1e-2
    max_iters: int = 50
    initial_trust_radius: float = 0.05
    min_trust_radius: float = 1e-8
    max_trust_radius: float = 10.0
    fd_step: float = 1e-6

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0 and self.fd_step > 0):
            raise ConfigError("optimizer tolerances and fd_step must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not 0 < self.min_trust_radius <= self.initial_trust_radius:
            raise ConfigError("need 0 < min_trust_radius <= initial_trust_radius")


@dataclass
class OptimizeResult:
    p: np.ndarray
    loss: LossBreakdown
    iterations: int
    n_eval: int
    converged: bool
    message: str


def _as_breakdown(value) -> LossBreakdown:
    if isinstance(value, LossBreakdown):
        return value
    return LossBreakdown(0.0, float(value))


def fd_gradient(f: Callable, p, rel_step=1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    p = np.asarray(p, dtype=float)
    h = rel_step * np.maximum(np.abs(p), 1e-3)
    g = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h[i]
        g[i] = (f(p + e) - f(p - e)) / (2 * h[i])
    return g


def fd_hessian(f: Callable, p, rel_step=1e-4) -> np.ndarray:
    """Central-difference Hessian from function values, symmetrised."""
    p = np.asarray(p, dtype=float)
    h = rel_step * np.maximum(np.abs(p), 1e-3)
    n = p.size
    H = np.empty((n, n))
    f0 = f(p)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(p + ei) - 2 * f0 + f(p - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(p + ei + ej) - f(p + ei - ej) - f(p - ei + ej)
                                 + f(p - ei - ej)) / (4 * h[i] * h[j])
    return H


def trust_region_step(g, H, radius):
    """Minimiser of ``g.s + s.H.s / 2`` subject to ``|s| <= radius``."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    gt = V.T @ g

    def step(lam):
        return -V @ (gt / (w + lam))

    if w[0] > 0:
        s = step(0.0)
        if np.linalg.norm(s) <= radius:
            return s
    lo = max(0.0, -w[0]) + 1e-15 * max(1.0, abs(w[-1]))
    if np.linalg.norm(step(lo)) <= radius:
        # hard case: move along the lowest eigenvector to the boundary
        s = step(lo)
        rest = np.sqrt(max(radius ** 2 - s @ s, 0.0))
        return s + rest * V[:, 0]
    hi = lo + np.linalg.norm(g) / radius + abs(w[-1]) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(step(mid)) > radius:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return step(hi)


def map_estimate(loss_fn: Callable, p0, config: OptimizerConfig = OptimizerConfig(),
                 executor=None) -> OptimizeResult:
    """Minimise ``loss_fn`` from ``p0`` with a trust-region Newton method.

    ``loss_fn`` returns a :class:`LossBreakdown` or a float.  If it exposes
    ``derivatives(p, rel_step, executor)`` (value, gradient, Hessian) that is
    used; otherwise gradient and Hessian come from finite differences of the
    scalar loss.  Iterates are clipped to stay at or above ``K_FLOOR``.

    Converges once an accepted step moves every coordinate by at most
    ``abs_tol`` or by at most ``rel_tol`` relative to its value.
    """
    p = np.asarray(p0, dtype=float).copy()
    if np.any(p <= 0):
        raise ConfigError("initial parameters must be positive")
    n_eval = 0

    def total(q):
        nonlocal n_eval
        n_eval += 1
        return _as_breakdown(loss_fn(q)).s_total

    def derivs(q):
        nonlocal n_eval
        if hasattr(loss_fn, "derivatives"):
            n_eval += 2 * q.size + 1
            value, g, H = loss_fn.derivatives(q, config.fd_step, executor)
            return _as_breakdown(value), g, H
        value = _as_breakdown(loss_fn(q))
        n_eval += 1
        g = fd_gradient(total, q, config.fd_step)
        H = fd_hessian(total, q, max(config.fd_step, 1e-4))
        return value, g, H

    current, g, H = derivs(p)
    if not np.isfinite(current.s_total):
        raise NumericalError("loss is not finite at the initial point")
    radius = config.initial_trust_radius
    converged = False
    message = "max_iters reached"
    it = 0
    while it < config.max_iters:
        it += 1
        s = trust_region_step(g, H, radius)
        trial = np.maximum(p + s, K_FLOOR)
        s = trial - p
        predicted = -(g @ s + 0.5 * s @ H @ s)
        if not predicted > 0:
            converged = True
            message = "no predicted decrease"
            break
        try:
            value = _as_breakdown(loss_fn(trial))
            n_eval += 1
            actual = current.s_total - value.s_total
        except NumericalError:
            value, actual = None, -np.inf
        if not np.isfinite(actual):
            actual = -np.inf
        ratio = actual / predicted
        if ratio > 0.1:
            step_norm = np.linalg.norm(s)
            p = trial
            if ratio > 0.75 and step_norm >= 0.99 * radius:
                radius = min(2 * radius, config.max_trust_radius)
            small = (np.abs(s) <= config.abs_tol) | (np.abs(s) <= config.rel_tol * np.abs(p))
            if np.all(small):
                current = value
                converged = True
                message = "step below tolerance"
                break
            current, g, H = derivs(p)
            log.debug("iter %d: S=%.6g radius=%.3g", it, current.s_total, radius)
        else:
            radius *= 0.25
            if radius < config.min_trust_radius:
                if value is None:
                    raise NumericalError("loss is non-finite at every trial point within the "
                                         "minimum trust radius")
                message = "trust radius collapsed"
                converged = True
                break
    return OptimizeResult(p, current, it, n_eval, converged, message)
