"""Sensitivity and robustness studies built on the core calibration pipeline.

Every study is a pure function of its inputs and seeds.  Results expose a
``write(out_dir)`` method that stores a config snapshot, summaries and
band curves.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .adaptive import AdaptiveResult, RefinementConfig, run_adaptive
from .conductivity import ConductivityModel
from .errors import ConfigError, NumericalError
from .forward import Discretization, SensorProbe, ThermalSetup, solve, solve_implicit
from .mcmc import (ChainConfig, CredibleBand, band_distance, credible_band, multi_chain_run,
                   sample, save_chain)
from .optimizer import OptimizerConfig, map_estimate
from .probabilistic import GaussianPrior, LossBreakdown, PosteriorProblem, PriorSpec

CONTEXT_FIELDS = ("rho", "cp", "h_source", "h_side", "h_inf", "T_source")


@dataclass(frozen=True)
class TruncatedNormal:
    """Normal(mean, std) restricted to ``[lower, upper]``; ``std = 0`` is a point mass."""

    mean: float
    std: float
    lower: Optional[float] = None
    upper: Optional[float] = None

    def __post_init__(self):
        if self.std < 0:
            raise ConfigError("std must be non-negative")
        lo = 0.1 * self.mean if self.lower is None else self.lower
        hi = 10.0 * self.mean if self.upper is None else self.upper
        if not hi > lo:
            raise ConfigError("truncation interval is empty")
        object.__setattr__(self, "lower", float(lo))
        object.__setattr__(self, "upper", float(hi))

    @property
    def _dist(self):
        a = (self.lower - self.mean) / self.std
        b = (self.upper - self.mean) / self.std
        return stats.truncnorm(a, b, loc=self.mean, scale=self.std)

    def logpdf(self, x) -> float:
        if self.std == 0:
            return 0.0 if x == self.mean else -math.inf
        return float(self._dist.logpdf(x))

    def draw(self, rng) -> float:
        if self.std == 0:
            return self.mean
        return float(self._dist.rvs(random_state=rng))


# means and stds before truncation; bounds default to 0.1 and 10 times the mean
PRIOR_TABLE = {
    "k": TruncatedNormal(0.3, 0.03),
    "rho": TruncatedNormal(900.0, 90.0),
    "cp": TruncatedNormal(2500.0, 250.0),
    "h_source": TruncatedNormal(100.0, 50.0),
    "h_side": TruncatedNormal(1.0, 0.5),
    "h_inf": TruncatedNormal(10.0, 5.0),
    "T_source": TruncatedNormal(40.0, 0.2),
}


def prior_table_from_dict(d) -> dict:
    table = dict(PRIOR_TABLE)
    for name, spec in (d or {}).items():
        if name not in PRIOR_TABLE:
            raise ConfigError(f"unknown prior-table entry {name!r}")
        table[name] = TruncatedNormal(**spec)
    return table


def _band_temps(model: ConductivityModel, n=200):
    return np.linspace(model.T_min, model.T_max, n)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default), encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


@dataclass
class PairedRuns:
    """Baseline and variant adaptive runs with their bands on a shared grid."""

    name: str
    runs: dict
    bands: dict
    settings: dict = field(default_factory=dict)

    def distances(self, edge: float = 0.0) -> dict:
        """Band distance of each variant to ``baseline``, ignoring temperatures below ``T_min + edge``."""
        base = self.bands["baseline"]
        mask = base.temperatures >= base.temperatures[0] + edge
        return {k: band_distance(base, b, mask) for k, b in self.bands.items() if k != "baseline"}

    def selections(self) -> dict:
        return {k: {"n_s": r.selected_n_s, "n_e": r.selected.mesh.n_e, "n_t": r.selected.mesh.n_t}
                for k, r in self.runs.items()}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "study.json", {"study": self.name, "settings": self.settings,
                                         "selections": self.selections(),
                                         "band_distance": self.distances(),
                                         "runs": {k: r.summary() for k, r in self.runs.items()}})
        for k, band in self.bands.items():
            band.to_csv(out / f"band_{k}.csv")


def _common_bands(runs: dict, temps=None):
    if temps is None:
        lo = max(r.selected.shape.T_min for r in runs.values())
        hi = min(r.selected.shape.T_max for r in runs.values())
        temps = np.linspace(lo, hi, 200)
    return {k: r.band(temps) for k, r in runs.items()}


def perturb_boundary_study(dataset, setup: ThermalSetup, config: RefinementConfig = RefinementConfig(),
                           chain_config: ChainConfig = ChainConfig(), factor: float = 1.02,
                           temps=None) -> PairedRuns:
    """Rerun the inference with h_source, h_inf and h_side scaled by ``factor``.

    Scaling h_side scales the lateral term 2 h_side / R by the same factor.
    """
    if not factor > 0:
        raise ConfigError("factor must be positive")
    perturbed = replace(setup, h_source=setup.h_source * factor, h_inf=setup.h_inf * factor,
                        h_side=setup.h_side * factor)
    runs = {"baseline": run_adaptive(dataset, setup, config, chain_config),
            "perturbed": run_adaptive(dataset, perturbed, config, chain_config)}
    return PairedRuns("boundary", runs, _common_bands(runs, temps), {"factor": factor})


def perturb_error_model_study(dataset, setup: ThermalSetup, config: RefinementConfig = RefinementConfig(),
                              chain_config: ChainConfig = ChainConfig(), mean_factor: float = 1.10,
                              std_factor: float = 1.10, temps=None) -> PairedRuns:
    """Separate runs with the error mean and the error std scaled, one at a time."""
    base = dataset.error_model
    if base is None:
        raise ConfigError("dataset carries no error model")
    runs = {"baseline": run_adaptive(dataset, setup, config, chain_config),
            "mean": run_adaptive(dataset.with_error_model(base.scaled(mean_factor, 1.0)), setup,
                                 config, chain_config),
            "std": run_adaptive(dataset.with_error_model(base.scaled(1.0, std_factor)), setup,
                                config, chain_config)}
    return PairedRuns("error_model", runs, _common_bands(runs, temps),
                      {"mean_factor": mean_factor, "std_factor": std_factor})


def cross_dataset_study(datasets: dict, setup: ThermalSetup, config: RefinementConfig = RefinementConfig(),
                        chain_config: ChainConfig = ChainConfig(), temps=None) -> PairedRuns:
    """Same inference on several datasets; the first key is the reference.

    Datasets that carry an ambient series drive the model with it.
    """
    if not datasets:
        raise ConfigError("no datasets given")
    runs = {}
    for i, (name, ds) in enumerate(datasets.items()):
        s = ds.apply_ambient(setup) if ds.ambient is not None and np.ptp(ds.ambient) > 0 else setup
        runs["baseline" if i == 0 else name] = run_adaptive(ds, s, config, chain_config)
    return PairedRuns("cross_dataset", runs, _common_bands(runs, temps),
                      {"datasets": list(datasets)})


@dataclass
class MultiChainStudy:
    single: CredibleBand
    pooled: CredibleBand
    distance: float
    chains: list
    settings: dict

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "study.json", {"study": "multi_chain", "settings": self.settings,
                                         "band_distance": self.distance,
                                         "chains": [c.summary() for c in self.chains]})
        self.single.to_csv(out / "band_single.csv")
        self.pooled.to_csv(out / "band_pooled.csv")


def multi_chain_study(problem: PosteriorProblem, p_map, k_chains: int = 3,
                      chain_config: ChainConfig = ChainConfig(burn_in=50_000),
                      single_config: ChainConfig = ChainConfig(), temps=None) -> MultiChainStudy:
    """Chains drawn from the prior versus one chain started at the MAP point."""
    temps = _band_temps(problem.shape) if temps is None else temps
    single = sample(problem.log_posterior, p_map, single_config)
    prior = GaussianPrior(problem.prior_spec, problem.shape.knots)
    multi = multi_chain_run(problem.log_posterior, k_chains, "prior", chain_config,
                            prior_draw=prior.draw)
    b1 = credible_band(single, problem.shape, temps)
    b2 = credible_band(multi.pooled, problem.shape, temps)
    return MultiChainStudy(b1, b2, band_distance(b1, b2), [single] + multi.chains,
                           {"k_chains": k_chains, "chain": asdict(chain_config),
                            "single": asdict(single_config)})


@dataclass
class ImplicitComparison:
    n_t: list
    rel_diff: list
    max_picard_iterations: list
    all_converged: list

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "study.json", {"study": "implicit", **asdict(self)})


def relative_difference(f_ex, f_im) -> float:
    """``|f_ex - f_im| / |f_im|`` in the Euclidean norm."""
    return float(np.linalg.norm(np.asarray(f_ex) - f_im) / np.linalg.norm(f_im))


def implicit_scheme_study(setup: ThermalSetup, k_model, measurement_times, n_t_values, n_e: int,
                          max_iter: int = 50, rel_tol: float = 1e-9) -> ImplicitComparison:
    """Explicit versus Picard-implicit conductivity at several time-step counts."""
    out = ImplicitComparison([], [], [], [])
    for n_t in n_t_values:
        disc = Discretization(n_e, n_t)
        probe = SensorProbe(setup, disc, measurement_times)
        ex = solve(setup, k_model, disc)
        im = solve_implicit(setup, k_model, disc, max_iter, rel_tol)
        out.n_t.append(int(n_t))
        out.rel_diff.append(relative_difference(probe(ex), probe(im)))
        out.max_picard_iterations.append(int(im.picard_iterations.max()))
        out.all_converged.append(bool(im.picard_converged.all()))
    return out


class ExtendedProblem:
    """Posterior over knot conductivities plus the six context parameters.

    Knot values keep the Gaussian-process prior; the context parameters
    get independent truncated normal priors.
    """

    def __init__(self, dataset, setup: ThermalSetup, disc: Discretization, shape: ConductivityModel,
                 prior: PriorSpec = PriorSpec(), prior_table: Optional[dict] = None):
        self.table = PRIOR_TABLE if prior_table is None else prior_table
        self.base = PosteriorProblem(dataset, setup, disc, shape, prior)
        self.setup = setup
        self.n_k = shape.n_s + 1

    def split(self, q):
        q = np.asarray(q, dtype=float)
        return q[: self.n_k], dict(zip(CONTEXT_FIELDS, q[self.n_k:]))

    def pack(self, p, setup: Optional[ThermalSetup] = None):
        s = self.setup if setup is None else setup
        return np.r_[np.asarray(p, dtype=float), [getattr(s, f) for f in CONTEXT_FIELDS]]

    def log_posterior(self, q):
        p, ctx = self.split(q)
        lp_ctx = sum(self.table[f].logpdf(v) for f, v in ctx.items())
        if not np.isfinite(lp_ctx):
            return -math.inf, -math.inf
        try:
            setup = replace(self.setup, **ctx)
        except ConfigError:
            return -math.inf, -math.inf
        base = self.base
        f = base.probe(solve(setup, base.model(p), base.disc))
        ll = -base.s_like_from_prediction(f)
        return ll + base.prior.logpdf(p) + lp_ctx, ll

    def proposal_std(self):
        ctx = [0.01 * self.table[f].std for f in CONTEXT_FIELDS]
        return np.r_[np.full(self.n_k, 0.01 * self.base.prior_spec.sigma_k), ctx]


@dataclass
class JointStudy:
    chain: object
    band: CredibleBand
    baseline_band: Optional[CredibleBand]
    context_mean: dict
    settings: dict

    @property
    def area_ratio(self) -> Optional[float]:
        if self.baseline_band is None:
            return None
        return self.band.area() / self.baseline_band.area()

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "study.json", {"study": "joint", "settings": self.settings,
                                         "context_mean": self.context_mean,
                                         "area_ratio": self.area_ratio,
                                         "chain": self.chain.summary()})
        self.band.to_csv(out / "band_joint.csv")
        if self.baseline_band is not None:
            self.baseline_band.to_csv(out / "band_baseline.csv")
        save_chain(self.chain, out / "chain_joint")


def joint_chain_config(base: ChainConfig) -> ChainConfig:
    """Five times the baseline length, keeping the second half."""
    n = 5 * base.n_samples
    return replace(base, n_samples=n, burn_in=n // 2)


def joint_estimation_study(dataset, setup: ThermalSetup, disc: Discretization, k_model: ConductivityModel,
                           prior: PriorSpec = PriorSpec(), prior_table: Optional[dict] = None,
                           chain_config: ChainConfig = ChainConfig(), baseline_chain=None,
                           temps=None) -> JointStudy:
    """Sample conductivities and context parameters together.

    The chain starts at ``k_model``'s values and the setup's context values
    and runs :func:`joint_chain_config` of ``chain_config``.
    """
    problem = ExtendedProblem(dataset, setup, disc, k_model, prior, prior_table)
    cfg = joint_chain_config(chain_config)
    q0 = problem.pack(k_model.k_values)
    chain = sample(problem.log_posterior, q0, cfg, proposal_std=problem.proposal_std())
    temps = _band_temps(k_model) if temps is None else temps
    band = credible_band(chain.kept[:, : problem.n_k], k_model, temps)
    base_band = None if baseline_chain is None else credible_band(baseline_chain, k_model, temps)
    ctx_mean = dict(zip(CONTEXT_FIELDS, chain.mean[problem.n_k:].tolist()))
    return JointStudy(chain, band, base_band, ctx_mean,
                      {"chain": asdict(cfg), "disc": asdict(disc), "n_s": k_model.n_s})


@dataclass
class ContextCalibration:
    values: dict
    k: float
    setup: ThermalSetup
    loss: float
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return {"values": self.values, "k_discarded": self.k, "loss": self.loss,
                "iterations": self.iterations, "converged": self.converged,
                "setup": self.setup.to_dict()}


def calibrate_context(dataset, setup: ThermalSetup, prior_table: Optional[dict] = None,
                      disc: Discretization = Discretization(16, 256),
                      optimizer: OptimizerConfig = OptimizerConfig(abs_tol=1e-4, rel_tol=1e-4,
                                                                   max_iters=100)) -> ContextCalibration:
    """MAP of a constant conductivity together with the context parameters.

    The conductivity is discarded; the returned setup carries the fitted
    context values.  Parameters whose prior std is zero stay at their mean.
    Optimisation runs on values divided by their prior means.
    """
    table = PRIOR_TABLE if prior_table is None else prior_table
    names = ("k",) + CONTEXT_FIELDS
    means = np.array([table[n].mean for n in names])
    free = np.array([table[n].std > 0 for n in names])
    shape = ConductivityModel.constant(table["k"].mean, dataset.T_min, dataset.T_max + 1e-9, 1)
    base = PosteriorProblem(dataset, setup, disc, shape)

    def full(u_free):
        u = np.ones(len(names))
        u[free] = u_free
        return u * means

    def objective(u_free):
        theta = full(u_free)
        lp = sum(table[n].logpdf(v) for n, v in zip(names, theta))
        if not np.isfinite(lp):
            return math.inf
        try:
            s = replace(setup, **dict(zip(CONTEXT_FIELDS, theta[1:])))
            f = base.probe(solve(s, shape.with_values([theta[0], theta[0]]), disc))
        except (ConfigError, NumericalError):
            return math.inf
        return LossBreakdown(-lp, base.s_like_from_prediction(f))

    if free.any():
        res = map_estimate(objective, np.ones(int(free.sum())), optimizer)
        theta, loss, its, conv = full(res.p), res.loss.s_total, res.iterations, res.converged
    else:
        theta = means
        value = objective(np.ones(0))
        loss, its, conv = float(getattr(value, "s_total", value)), 0, True
    values = dict(zip(CONTEXT_FIELDS, (float(v) for v in theta[1:])))
    return ContextCalibration(values, float(theta[0]), replace(setup, **values), float(loss), its, conv)
