"""Nested refinement of the discretization and of the conductivity model.

For a fixed number of segments the mesh is refined by comparing a
space-doubling and a time-doubling branch; the outer loop doubles the
segment count until the data misfit reaches the noise level or the
information criteria stop improving.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .conductivity import ConductivityModel, k_min_over_elements, refine
from .errors import CalibrationError, ConfigError, NumericalError
from .forward import Discretization, ThermalSetup, min_elements_for_timesteps, solve
from .mcmc import ChainConfig, PosteriorChain, credible_band, sample
from .model_selection import COMPLEXITY_TOL, SelectionRecord, bic, complexity_justified, dic
from .optimizer import OptimizerConfig, map_estimate
from .probabilistic import PosteriorProblem, PriorSpec, morozov_threshold

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinementConfig:
    gamma: float = 0.01
    delta: int = 3
    phi: float = 0.05
    max_n_s: int = 16
    n_e0: int = 1
    n_t0: int = 1
    p0: tuple = (0.3, 0.3)
    max_mesh_iters: int = 20
    complexity_tol: float = COMPLEXITY_TOL
    bic_only: bool = False
    optimizer: OptimizerConfig = OptimizerConfig()
    prior: PriorSpec = PriorSpec()

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.delta < 2:
            raise ConfigError("delta must be >= 2")
        if not 0 < self.phi < 1:
            raise ConfigError("phi must lie in (0, 1)")
        if self.max_n_s < 1 or self.n_e0 < 1 or self.n_t0 < 1 or self.max_mesh_iters < 1:
            raise ConfigError("max_n_s, n_e0, n_t0 and max_mesh_iters must be >= 1")
        if len(self.p0) != 2 or min(self.p0) <= 0:
            raise ConfigError("p0 must hold two positive conductivities")
        if not self.complexity_tol >= 0:
            raise ConfigError("complexity_tol must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p0"] = list(self.p0)
        return d

    @classmethod
    def from_dict(cls, d) -> "RefinementConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown refinement fields: {sorted(unknown)}")
        if isinstance(d.get("optimizer"), dict):
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if isinstance(d.get("prior"), dict):
            d["prior"] = PriorSpec(**d["prior"])
        if "p0" in d:
            d["p0"] = tuple(float(v) for v in d["p0"])
        return cls(**d)


@dataclass
class BranchResult:
    axis: str
    n_e: int
    n_t: int
    p: Optional[np.ndarray]
    s_like: float
    s_prior: float
    n_eval: int
    converged: bool
    error: str = ""

    @property
    def s_total(self) -> float:
        return self.s_like + self.s_prior

    @property
    def units(self) -> float:
        return float(self.n_eval) * self.n_e ** 2 * self.n_t

    @property
    def ok(self) -> bool:
        return self.p is not None

    def to_dict(self) -> dict:
        return {"axis": self.axis, "n_e": self.n_e, "n_t": self.n_t, "s_like": self.s_like,
                "s_prior": self.s_prior, "n_eval": self.n_eval, "units": self.units,
                "converged": self.converged, "error": self.error}


@dataclass
class IterationRecord:
    n_s: int
    iteration: int
    n_e: int
    n_t: int
    axis: str
    s_like: float
    s_prior: float
    units: float
    p: np.ndarray
    branches: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"n_s": self.n_s, "iteration": self.iteration, "n_e": self.n_e, "n_t": self.n_t,
                "axis": self.axis, "s_like": self.s_like, "s_prior": self.s_prior,
                "units": self.units, "p": [float(v) for v in self.p],
                "branches": [b.to_dict() for b in self.branches]}


@dataclass
class RefinementTrace:
    """Every mesh iteration of every complexity level, in order."""

    records: list = field(default_factory=list)
    mcmc_units: dict = field(default_factory=dict)

    def for_n_s(self, n_s) -> list:
        return [r for r in self.records if r.n_s == n_s]

    def units_by_n_s(self) -> dict:
        out = {}
        for r in self.records:
            out[r.n_s] = out.get(r.n_s, 0.0) + r.units
        return out

    @property
    def total_units(self) -> float:
        return sum(r.units for r in self.records) + sum(self.mcmc_units.values())

    def to_dict(self) -> dict:
        return {"records": [r.to_dict() for r in self.records],
                "units_by_n_s": {str(k): v for k, v in self.units_by_n_s().items()},
                "mcmc_units": {str(k): v for k, v in self.mcmc_units.items()}}


@dataclass
class MeshResult:
    n_s: int
    p: np.ndarray
    n_e: int
    n_t: int
    s_like: float
    s_prior: float
    stop_reason: str
    selected_iteration: int
    threshold: float
    records: list
    sigma_rel: Optional[float] = None

    @property
    def units(self) -> float:
        return sum(r.units for r in self.records)

    @property
    def disc(self) -> Discretization:
        return Discretization(self.n_e, self.n_t)


class RefinementError(NumericalError):
    """Refinement aborted; ``trace`` holds everything recorded so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def stabilization_stat(s_like_history, delta: int = 3) -> float:
    """Population std over |mean| of the last ``delta`` values."""
    h = np.asarray(s_like_history, dtype=float)
    if delta < 1 or h.size < delta:
        raise ConfigError(f"need at least {delta} values")
    tail = h[-delta:]
    mean = tail.mean()
    if abs(mean) < 1e-30:
        raise NumericalError("mean of the last values is zero; relative std undefined")
    return float(tail.std() / abs(mean))


def _optimize_branch(axis, dataset, setup, shape, p0, n_e, n_t, config: RefinementConfig):
    problem = PosteriorProblem(dataset, setup, Discretization(n_e, n_t), shape, config.prior)
    try:
        res = map_estimate(problem, p0, config.optimizer)
    except CalibrationError as exc:
        return BranchResult(axis, n_e, n_t, None, np.inf, np.inf, problem.n_eval, False, str(exc))
    return BranchResult(axis, n_e, n_t, res.p, res.loss.s_like, res.loss.s_prior, problem.n_eval,
                        res.converged)


def _time_branch_elements(setup, shape, p, n_e, n_t):
    traj = solve(setup, shape.with_values(p), Discretization(n_e, n_t))
    k_min = k_min_over_elements(shape.with_values(p), traj)
    return max(n_e, min_elements_for_timesteps(2 * n_t, k_min, setup))


def mesh_refine(dataset, setup: ThermalSetup, k_shape: ConductivityModel, p0,
                config: RefinementConfig = RefinementConfig(), executor=None,
                threshold: Optional[float] = None) -> MeshResult:
    """Refine ``(n_e, n_t)`` for a fixed conductivity shape.

    Each iteration optimises a space branch ``(2 n_e, n_t)`` and a time
    branch ``(n_e', 2 n_t)``, where ``n_e'`` is raised to satisfy the
    element bound for the current conductivity estimate.  Both branches
    start from ``p0``; the one with the smaller loss is kept, with ties going
    to the time branch.  Stops when S_like reaches the Morozov threshold
    (that iteration is selected) or when the relative std of the last
    ``delta`` S_like values is at most ``phi`` (the first of them is
    selected).
    """
    p0 = np.asarray(p0, dtype=float)
    if np.any(p0 <= 0):
        raise ConfigError("p0 must be positive")
    if threshold is None:
        threshold = morozov_threshold(dataset.error_model, dataset.d, config.gamma)
    n_e, n_t = config.n_e0, config.n_t0
    p_cur = p0
    records = []
    for it in range(1, config.max_mesh_iters + 1):
        try:
            n_e_time = _time_branch_elements(setup, k_shape, p_cur, n_e, n_t)
        except CalibrationError:
            n_e_time = n_e
        jobs = [("space", 2 * n_e, n_t), ("time", n_e_time, 2 * n_t)]
        args = [(axis, dataset, setup, k_shape, p0, ne, nt, config) for axis, ne, nt in jobs]
        if executor is not None:
            branches = list(executor.map(lambda a: _optimize_branch(*a), args))
        else:
            branches = [_optimize_branch(*a) for a in args]
        space, time = branches
        if not space.ok and not time.ok:
            raise RefinementError(f"n_s={k_shape.n_s}, iteration {it}: both branches failed "
                                  f"({space.error}; {time.error})", records)
        chosen = space if (space.ok and (not time.ok or space.s_total < time.s_total)) else time
        n_e, n_t, p_cur = chosen.n_e, chosen.n_t, chosen.p
        rec = IterationRecord(k_shape.n_s, it, n_e, n_t, chosen.axis, chosen.s_like, chosen.s_prior,
                              space.units + time.units, chosen.p, branches)
        records.append(rec)
        log.info("n_s=%d it=%d %s n_e=%d n_t=%d S_like=%.6g", k_shape.n_s, it, chosen.axis,
                 n_e, n_t, chosen.s_like)
        if chosen.s_like <= threshold:
            return MeshResult(k_shape.n_s, rec.p, n_e, n_t, rec.s_like, rec.s_prior, "morozov", it,
                              threshold, records)
        if len(records) >= config.delta:
            try:
                srel = stabilization_stat([r.s_like for r in records], config.delta)
            except NumericalError:
                srel = np.inf
            if srel <= config.phi:
                sel = records[-config.delta]
                return MeshResult(k_shape.n_s, sel.p, sel.n_e, sel.n_t, sel.s_like, sel.s_prior,
                                  "stabilized", sel.iteration, threshold, records, srel)
    best = records[-1]
    return MeshResult(k_shape.n_s, best.p, best.n_e, best.n_t, best.s_like, best.s_prior,
                      "max_iters", best.iteration, threshold, records)


@dataclass
class LevelResult:
    mesh: MeshResult
    record: SelectionRecord
    chain: Optional[PosteriorChain] = None
    shape: Optional[ConductivityModel] = None

    @property
    def n_s(self) -> int:
        return self.mesh.n_s

    @property
    def model(self) -> ConductivityModel:
        return self.shape.with_values(self.mesh.p)


@dataclass
class AdaptiveResult:
    levels: list
    selected_index: int
    stop_reason: str
    threshold: float
    trace: RefinementTrace

    @property
    def selected(self) -> LevelResult:
        return self.levels[self.selected_index]

    @property
    def selected_n_s(self) -> int:
        return self.selected.n_s

    def band(self, temps=None, level=0.99):
        sel = self.selected
        if sel.chain is None:
            raise ConfigError("selected level has no chain")
        return credible_band(sel.chain, sel.shape, temps, level)

    def summary(self) -> dict:
        sel = self.selected
        return {
            "selected": {"n_s": sel.n_s, "n_e": sel.mesh.n_e, "n_t": sel.mesh.n_t,
                         "p": [float(v) for v in sel.mesh.p], "s_like": sel.mesh.s_like,
                         "s_prior": sel.mesh.s_prior, "model": sel.model.to_dict()},
            "stop_reason": self.stop_reason,
            "threshold": self.threshold,
            "levels": [{"n_s": lv.n_s, "n_e": lv.mesh.n_e, "n_t": lv.mesh.n_t,
                        "mesh_stop": lv.mesh.stop_reason,
                        "selected_iteration": lv.mesh.selected_iteration,
                        "sigma_rel": lv.mesh.sigma_rel, "units": lv.mesh.units,
                        "selection": lv.record.to_dict(),
                        "chain": None if lv.chain is None else lv.chain.summary()}
                       for lv in self.levels],
            "total_units": self.trace.total_units,
        }


def _selection_record(problem: PosteriorProblem, mesh: MeshResult, chain) -> SelectionRecord:
    ll_map = -mesh.s_like
    lp_map = -(mesh.s_like + mesh.s_prior)
    rec = SelectionRecord(mesh.n_s, problem.n_p, problem.n_d, mesh.s_like, mesh.s_prior,
                          bic(ll_map, problem.n_p, problem.n_d), bic(lp_map, problem.n_p, problem.n_d))
    if chain is not None and chain.acceptance_rate > 0:
        rec.dic, rec.p_d = dic(chain, problem.log_likelihood)
    elif chain is not None:
        # a chain that never moved carries no posterior spread; its DIC would be
        # the unpenalised MAP deviance, so the level is compared by BIC instead
        log.warning("n_s=%d: chain accepted no proposal after burn-in; DIC not recorded", mesh.n_s)
    return rec


def _run_chain(problem: PosteriorProblem, p, chain_config: ChainConfig, trace, n_s):
    chain = sample(problem.log_posterior, p, chain_config)
    trace.mcmc_units[n_s] = float(chain_config.n_samples) * problem.disc.n_e ** 2 * problem.disc.n_t
    return chain


def run_adaptive(dataset, setup: ThermalSetup, config: RefinementConfig = RefinementConfig(),
                 chain_config: ChainConfig = ChainConfig(), threads: int = 1) -> AdaptiveResult:
    """Alternate mesh refinement and segment doubling until a stopping rule fires.

    After each level: stop if the Morozov threshold was reached (select
    this level); stop if the information criterion did not improve by more
    than ``complexity_tol`` over the previous level (select the previous
    one); stop at ``max_n_s``.  In ``bic_only`` mode no chains are run
    until the selection is known, and the criterion is BIC.
    """
    if dataset.error_model is None:
        raise ConfigError("dataset carries no error model")
    threshold = morozov_threshold(dataset.error_model, dataset.d, config.gamma)
    trace = RefinementTrace()
    levels = []
    shape = ConductivityModel(dataset.T_min, dataset.T_max, np.asarray(config.p0, dtype=float))
    p0 = shape.k_values
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while True:
            try:
                mesh = mesh_refine(dataset, setup, shape, p0, config, executor, threshold)
            except RefinementError as exc:
                trace.records.extend(exc.trace or [])
                exc.trace = trace
                raise
            trace.records.extend(mesh.records)
            problem = PosteriorProblem(dataset, setup, mesh.disc, shape, config.prior)
            chain = None if config.bic_only else _run_chain(problem, mesh.p, chain_config, trace, shape.n_s)
            level = LevelResult(mesh, _selection_record(problem, mesh, chain), chain, shape)
            levels.append(level)
            if mesh.stop_reason == "morozov":
                selected, reason = len(levels) - 1, "morozov"
                break
            if len(levels) > 1:
                criterion = "bic" if config.bic_only else None
                if not complexity_justified(levels[-2].record, level.record, config.complexity_tol,
                                            criterion):
                    selected, reason = len(levels) - 2, "not_justified"
                    break
            if shape.n_s >= config.max_n_s:
                selected, reason = len(levels) - 1, "max_n_s"
                break
            refined = refine(shape.with_values(mesh.p))
            shape, p0 = refined, refined.k_values
        sel = levels[selected]
        if sel.chain is None:
            problem = PosteriorProblem(dataset, setup, sel.mesh.disc, sel.shape, config.prior)
            sel.chain = _run_chain(problem, sel.mesh.p, chain_config, trace, sel.n_s)
            sel.record = _selection_record(problem, sel.mesh, sel.chain)
    finally:
        if executor is not None:
            executor.shutdown()
    return AdaptiveResult(levels, selected, reason, threshold, trace)
