"""Robust adaptive Metropolis sampling and chain diagnostics."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .conductivity import ConductivityModel
from .errors import ConfigError, DataError, NumericalError

GEWEKE_TOL = 1e-2


@dataclass(frozen=True)
class ChainConfig:
    """Sampler settings.

    ``initial_proposal_std`` is the per-coordinate std of the initial
    (diagonal) proposal; the default is 1% of the prior std 0.03.
    ``adapt=False`` freezes the proposal.
    """

    n_samples: int = 100_000
    burn_in: int = 10_000
    target_acceptance: float = 0.234
    seed: int = 0
    decay: float = 2.0 / 3.0
    initial_proposal_std: float = 3e-4
    adapt: bool = True

    def __post_init__(self):
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if not 0 <= self.burn_in < self.n_samples:
            raise ConfigError("need 0 <= burn_in < n_samples")
        if not 0 < self.target_acceptance < 1:
            raise ConfigError("target_acceptance must lie in (0, 1)")
        if not 0.5 < self.decay <= 1:
            raise ConfigError("decay must lie in (0.5, 1]")
        if not self.initial_proposal_std >= 0:
            raise ConfigError("initial_proposal_std must be non-negative")


@dataclass
class GewekeResult:
    passed: bool
    rel_to_first: np.ndarray
    rel_to_last: np.ndarray
    reason: str = ""

    def to_dict(self):
        return {"passed": self.passed, "rel_to_first": self.rel_to_first.tolist(),
                "rel_to_last": self.rel_to_last.tolist(), "reason": self.reason}


@dataclass
class PosteriorChain:
    """Full sample matrix (burn-in included) plus diagnostics of the kept part."""

    samples: np.ndarray
    burn_in: int
    acceptance_rate: float
    log_posterior: np.ndarray
    log_likelihood: Optional[np.ndarray] = None
    seed: Optional[int] = None
    ess: np.ndarray = field(init=False)
    geweke: GewekeResult = field(init=False)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if not 0 <= self.acceptance_rate <= 1:
            raise ValueError("acceptance rate outside [0, 1]")
        kept = self.kept
        if kept.shape[0] >= 10:
            self.ess = effective_sample_size(kept)
            self.geweke = geweke(kept)
        else:
            self.ess = np.full(kept.shape[1], float(kept.shape[0]))
            self.geweke = GewekeResult(False, np.full(kept.shape[1], np.nan),
                                       np.full(kept.shape[1], np.nan), "chain shorter than 10")

    @property
    def kept(self) -> np.ndarray:
        return self.samples[self.burn_in:]

    @property
    def kept_log_likelihood(self) -> Optional[np.ndarray]:
        return None if self.log_likelihood is None else self.log_likelihood[self.burn_in:]

    @property
    def geweke_pass(self) -> bool:
        return self.geweke.passed

    @property
    def mean(self) -> np.ndarray:
        return self.kept.mean(axis=0)

    def summary(self) -> dict:
        return {"n_samples": int(self.samples.shape[0]), "burn_in": int(self.burn_in),
                "seed": self.seed, "acceptance_rate": float(self.acceptance_rate),
                "ess": self.ess.tolist(), "geweke": self.geweke.to_dict(),
                "posterior_mean": self.mean.tolist()}


def _split(value):
    if isinstance(value, tuple):
        return float(value[0]), float(value[1])
    return float(value), math.nan


def sample(log_posterior_fn: Callable, p0, config: ChainConfig = ChainConfig(),
           proposal_std=None) -> PosteriorChain:
    """Robust adaptive Metropolis chain started at ``p0``.

    ``log_posterior_fn(p)`` returns the log-posterior, or a tuple
    ``(log_posterior, log_likelihood)`` in which case the likelihood of
    every state is stored for later DIC computation.  Proposals with a
    non-positive coordinate are rejected without evaluation.  The reported
    acceptance rate covers the steps after burn-in.

    After step ``i`` the proposal factor ``S`` is replaced by the Cholesky
    factor of ``S (I + eta (alpha - target) u u^T / |u|^2) S^T`` with
    ``eta = i^-decay``.  ``proposal_std`` overrides the initial
    per-coordinate proposal std (scalar or vector).
    """
    p = np.asarray(p0, dtype=float).reshape(-1).copy()
    n_p = p.size
    lp, ll = _split(log_posterior_fn(p))
    if not np.isfinite(lp):
        raise NumericalError("log-posterior is not finite at the initial point")
    rng = np.random.default_rng(config.seed)
    std0 = config.initial_proposal_std if proposal_std is None else proposal_std
    S = np.diag(np.broadcast_to(np.asarray(std0, dtype=float), (n_p,))).copy()
    n = config.n_samples
    samples = np.empty((n, n_p))
    log_post = np.empty(n)
    log_like = np.empty(n)
    samples[0], log_post[0], log_like[0] = p, lp, ll
    accepted = np.zeros(n, dtype=bool)
    eye = np.eye(n_p)
    for i in range(1, n):
        u = rng.standard_normal(n_p)
        q = p + S @ u
        alpha = 0.0
        if np.all(q > 0):
            lq, llq = _split(log_posterior_fn(q))
            if np.isfinite(lq):
                alpha = 1.0 if lq >= lp else math.exp(lq - lp)
        if alpha > 0 and (alpha >= 1.0 or rng.random() < alpha):
            p, lp, ll = q, lq, llq
            accepted[i] = True
        samples[i], log_post[i], log_like[i] = p, lp, ll
        if config.adapt:
            eta = i ** -config.decay
            uu = u @ u
            if uu > 0:
                M = S @ (eye + eta * (alpha - config.target_acceptance) * np.outer(u, u) / uu) @ S.T
                try:
                    S = np.linalg.cholesky(0.5 * (M + M.T))
                except np.linalg.LinAlgError:
                    pass
    store_ll = None if np.all(np.isnan(log_like)) else log_like
    rate = float(accepted[max(config.burn_in, 1):].mean())
    return PosteriorChain(samples, config.burn_in, rate, log_post, store_ll, config.seed)


def geweke(samples, first=0.1, last=0.5, tol=GEWEKE_TOL) -> GewekeResult:
    """Compare means of the first 10% and the last 50% of a kept chain.

    Passes when, for every parameter, the gap relative to either mean is
    at most ``tol``.
    """
    x = np.asarray(samples, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    n = x.shape[0]
    if n < 10:
        raise DataError("Geweke diagnostic needs at least 10 samples")
    m10 = x[: max(1, int(round(first * n)))].mean(axis=0)
    m50 = x[n - max(1, int(round(last * n))):].mean(axis=0)
    gap = np.abs(m10 - m50)
    if np.any(np.abs(m10) < 1e-30) or np.any(np.abs(m50) < 1e-30):
        nan = np.full(x.shape[1], np.nan)
        return GewekeResult(False, nan, nan, "a segment mean is zero; relative gap undefined")
    r10, r50 = gap / np.abs(m10), gap / np.abs(m50)
    passed = bool(np.all(r10 <= tol) and np.all(r50 <= tol))
    return GewekeResult(passed, r10, r50, "" if passed else "segment means differ by more than tolerance")


def autocorrelation(x) -> np.ndarray:
    """Normalised autocorrelation of a 1D series via FFT (biased estimator)."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(x, size)
    acov = np.fft.irfft(spec * np.conj(spec), size)[:n]
    if acov[0] <= 0:
        return np.r_[1.0, np.zeros(n - 1)]
    return acov / acov[0]


def effective_sample_size(samples) -> np.ndarray:
    """``n / (1 + 2 sum rho_k)`` per parameter, truncated at the first negative ``rho_k``."""
    x = np.asarray(samples, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    n = x.shape[0]
    if n < 10:
        raise DataError("ESS needs at least 10 samples")
    out = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        rho = autocorrelation(x[:, j])[1:]
        neg = np.flatnonzero(rho < 0)
        tail = rho[: neg[0]] if neg.size else rho
        out[j] = min(n / (1.0 + 2.0 * tail.sum()), float(n))
    return out


@dataclass
class CredibleBand:
    temperatures: np.ndarray
    lower: np.ndarray
    mean: np.ndarray
    upper: np.ndarray
    level: float
    std: Optional[np.ndarray] = None

    def area(self) -> float:
        return float(np.trapezoid(self.upper - self.lower, self.temperatures))

    def contains(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return (values >= self.lower) & (values <= self.upper)

    def to_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["temp_C", "lower", "mean", "upper"])
            for row in zip(self.temperatures, self.lower, self.mean, self.upper):
                w.writerow([repr(float(v)) for v in row])


def interpolation_matrix(knots, temps) -> np.ndarray:
    """Matrix ``W`` with ``W @ k`` the clamped piecewise-linear curve at ``temps``."""
    knots = np.asarray(knots, dtype=float)
    eye = np.eye(knots.size)
    return np.column_stack([np.interp(temps, knots, eye[j]) for j in range(knots.size)])


def credible_band(chain, knots, temps=None, level=0.99) -> CredibleBand:
    """Pointwise quantile band of the sampled conductivity curves.

    ``chain`` is a :class:`PosteriorChain` (its kept part is used) or a
    plain sample matrix.  ``knots`` may be a :class:`ConductivityModel`.
    """
    x = chain.kept if isinstance(chain, PosteriorChain) else np.atleast_2d(np.asarray(chain, float))
    if x.shape[0] == 0:
        raise DataError("no samples for a credible band")
    if isinstance(knots, ConductivityModel):
        knots = knots.knots
    knots = np.asarray(knots, dtype=float)
    if temps is None:
        temps = np.linspace(knots[0], knots[-1], 200)
    temps = np.asarray(temps, dtype=float)
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    curves = x @ interpolation_matrix(knots, temps).T
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(curves, [tail, 1.0 - tail], axis=0)
    return CredibleBand(temps, lo, curves.mean(axis=0), hi, level, curves.std(axis=0))


def band_distance(a: CredibleBand, b: CredibleBand, mask=None) -> float:
    """Largest gap between two band means, in units of their pooled std."""
    if a.std is None or b.std is None:
        raise ConfigError("bands carry no std")
    if a.temperatures.shape != b.temperatures.shape or not np.allclose(a.temperatures, b.temperatures):
        raise ConfigError("bands are evaluated at different temperatures")
    pooled = np.sqrt(0.5 * (a.std ** 2 + b.std ** 2))
    z = np.abs(a.mean - b.mean) / np.maximum(pooled, 1e-300)
    if mask is not None:
        z = z[np.asarray(mask, dtype=bool)]
    return float(np.max(z)) if z.size else 0.0


@dataclass
class MultiChainResult:
    chains: list
    pooled: np.ndarray
    initial_points: list

    @property
    def pooled_log_likelihood(self):
        parts = [c.kept_log_likelihood for c in self.chains]
        return None if any(p is None for p in parts) else np.concatenate(parts)


def multi_chain_run(log_posterior_fn: Callable, k_chains: int, init_mode: str, config: ChainConfig,
                    p_map=None, prior_draw: Optional[Callable] = None, executor=None,
                    max_draw_attempts: int = 1000) -> MultiChainResult:
    """Run ``k_chains`` independent chains and pool their kept samples.

    Chain ``i`` uses seed ``config.seed + i``.  ``init_mode`` is ``"map"``
    (every chain starts at ``p_map``) or ``"prior"`` (each start is drawn
    with ``prior_draw(rng)`` until positive and finite).
    """
    if k_chains < 1:
        raise ConfigError("k_chains must be >= 1")
    starts = []
    for i in range(k_chains):
        if init_mode == "map":
            if p_map is None:
                raise ConfigError("init_mode 'map' needs p_map")
            starts.append(np.asarray(p_map, dtype=float))
        elif init_mode == "prior":
            if prior_draw is None:
                raise ConfigError("init_mode 'prior' needs prior_draw")
            rng = np.random.default_rng([config.seed, i, 1])
            for _ in range(max_draw_attempts):
                q = np.asarray(prior_draw(rng), dtype=float)
                if np.all(q > 0) and np.isfinite(_split(log_posterior_fn(q))[0]):
                    break
            else:
                raise NumericalError(f"chain {i}: no admissible prior draw")
            starts.append(q)
        else:
            raise ConfigError(f"unknown init_mode {init_mode!r}")
    configs = [ChainConfig(**{**asdict(config), "seed": config.seed + i}) for i in range(k_chains)]

    def run(args):
        i, start, cfg = args
        try:
            return sample(log_posterior_fn, start, cfg)
        except NumericalError as exc:
            raise NumericalError(f"chain {i} failed to start: {exc}") from exc

    jobs = list(zip(range(k_chains), starts, configs))
    if executor is not None:
        chains = list(executor.map(run, jobs))
    elif k_chains > 1:
        with ThreadPoolExecutor(max_workers=1) as pool:
            chains = list(pool.map(run, jobs))
    else:
        chains = [run(jobs[0])]
    pooled = np.vstack([c.kept for c in chains])
    return MultiChainResult(chains, pooled, starts)


def save_chain(chain: PosteriorChain, path, config: Optional[ChainConfig] = None, extra=None):
    """Write ``<path>.csv`` (one row per sample) and a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_p = chain.samples.shape[1]
    header = [f"k{j + 1}" for j in range(n_p)] + ["log_posterior"]
    cols = [chain.samples, chain.log_posterior[:, None]]
    if chain.log_likelihood is not None:
        header.append("log_likelihood")
        cols.append(chain.log_likelihood[:, None])
    np.savetxt(path.with_suffix(".csv"), np.hstack(cols), delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")
    meta = chain.summary()
    meta["config"] = asdict(config) if config is not None else None
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, default=_to_builtin),
                                        encoding="utf-8")


def _to_builtin(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def load_chain(path) -> PosteriorChain:
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        with path.with_suffix(".csv").open(encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load chain {path}: {exc}") from exc
    n_p = sum(h.startswith("k") for h in header)
    ll = data[:, header.index("log_likelihood")] if "log_likelihood" in header else None
    return PosteriorChain(data[:, :n_p], int(meta["burn_in"]), float(meta["acceptance_rate"]),
                          data[:, header.index("log_posterior")], ll, meta.get("seed"))
