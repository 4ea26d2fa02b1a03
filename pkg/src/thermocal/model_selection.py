"""Information criteria and the model-complexity decision."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NumericalError

COMPLEXITY_TOL = 0.05


@dataclass
class SelectionRecord:
    """Criteria for one model complexity.

    ``bic`` uses the log-likelihood at the MAP point; ``bic_posterior`` uses
    the log-posterior there instead.  ``dic`` and ``p_d`` are ``None`` when
    no chain was run.
    """

    n_s: int
    n_p: int
    n_d: int
    s_like_at_map: float
    s_prior_at_map: float
    bic: float
    bic_posterior: float
    dic: Optional[float] = None
    p_d: Optional[float] = None

    def __post_init__(self):
        if self.p_d is not None and self.p_d < 0:
            raise ValueError("p_D must be non-negative")

    @property
    def criterion(self) -> float:
        return self.bic if self.dic is None else self.dic

    @property
    def criterion_name(self) -> str:
        return "bic" if self.dic is None else "dic"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["criterion"] = self.criterion_name
        return out


def bic(max_log_objective: float, n_p: int, n_d: int) -> float:
    """``-2 log L + n_p ln n_d``."""
    if n_p < 1 or n_d < 1:
        raise ConfigError("bic needs n_p >= 1 and n_d >= 1")
    return -2.0 * float(max_log_objective) + n_p * math.log(n_d)


def dic(chain, log_likelihood_fn: Optional[Callable] = None):
    """Deviance information criterion ``-2 log P(d | p_mean) + 2 p_D``.

    ``p_D = 2 Var(log-likelihood)`` over the kept samples, with divisor
    ``n - 1``.  Stored per-sample log-likelihoods are used when the chain
    carries them; otherwise ``log_likelihood_fn`` is evaluated once per
    distinct sample.  Returns ``(dic, p_D)``.
    """
    samples = chain.kept if hasattr(chain, "kept") else np.atleast_2d(np.asarray(chain, float))
    if samples.shape[0] == 0:
        raise ConfigError("dic needs a non-empty chain")
    stored = getattr(chain, "kept_log_likelihood", None)
    if stored is not None and np.all(np.isfinite(stored)):
        ll = np.asarray(stored, dtype=float)
    else:
        if log_likelihood_fn is None:
            raise ConfigError("chain has no stored log-likelihoods and no function was given")
        uniq, inverse = np.unique(samples, axis=0, return_inverse=True)
        values = np.array([log_likelihood_fn(u) for u in uniq], dtype=float)
        ll = values[np.asarray(inverse).reshape(-1)]
    if log_likelihood_fn is None:
        raise ConfigError("dic needs log_likelihood_fn to evaluate the posterior mean")
    p_mean = samples.mean(axis=0)
    ll_mean = float(log_likelihood_fn(p_mean))
    if not np.isfinite(ll_mean):
        raise NumericalError("log-likelihood is not finite at the posterior mean")
    # shifting by one sample keeps constant chains at exactly zero variance
    p_d = 2.0 * float(np.var(ll - ll[0], ddof=1)) if ll.size > 1 else 0.0
    return -2.0 * ll_mean + 2.0 * p_d, p_d


def complexity_justified(previous: SelectionRecord, current: SelectionRecord,
                         tol: float = COMPLEXITY_TOL, criterion: Optional[str] = None) -> bool:
    """True when the active criterion improves by more than ``tol`` relative to ``previous``.

    The active criterion is DIC when both records carry it, else BIC;
    ``criterion`` forces one.
    """
    if previous.n_s >= current.n_s:
        raise ConfigError("previous model must have fewer segments than the current one")
    if criterion is None:
        criterion = "dic" if previous.dic is not None and current.dic is not None else "bic"
    if criterion not in ("bic", "dic"):
        raise ConfigError(f"unknown criterion {criterion!r}")
    prev, curr = getattr(previous, criterion), getattr(current, criterion)
    if prev is None or curr is None:
        raise ConfigError(f"records lack {criterion}")
    if prev == 0:
        raise NumericalError("previous criterion is exactly zero; relative improvement undefined")
    return (prev - curr) / abs(prev) > tol
