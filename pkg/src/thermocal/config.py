"""Run configuration: YAML file sections mapped onto the module types.

Every field has a default, so an empty file (or none) is a valid config.
``RunConfig.to_dict`` materialises all defaults, which is what run reports
echo back.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .adaptive import RefinementConfig
from .errors import ConfigError
from .forward import Discretization, ThermalSetup
from .mcmc import ChainConfig
from .optimizer import OptimizerConfig
from .probabilistic import PriorSpec

SCHEMA_VERSION = 1

_CONSUMERS = {"data": 0, "chain": 1, "study": 2}


def derive_seed(seed: int, consumer: str) -> int:
    """Deterministic per-consumer seed fanned out from the top-level seed.

    The data generator takes the top-level seed unchanged, so ``synthesize
    --seed s`` reproduces ``data.synthesize(..., seed=s)``; every other
    consumer gets an independent stream from ``SeedSequence``.
    """
    if consumer == "data":
        return int(seed)
    ss = np.random.SeedSequence([int(seed), _CONSUMERS[consumer]])
    return int(ss.generate_state(1)[0])


@dataclass
class DataSection:
    """Where the measurements come from.

    ``path=None`` synthesises data from ``ground_truth`` (default anchors
    when ``None``).  ``thin`` keeps every n-th reading; ``steady_fraction``
    keeps only the final part of the series.
    """

    path: Optional[str] = None
    error_model: Optional[str] = None
    ground_truth: Optional[str] = None
    cadence: float = 20.0
    noise: bool = True
    thin: int = 1
    steady_fraction: Optional[float] = None
    use_ambient: bool = True


@dataclass
class ModelSection:
    n_s: int = 8
    k_values: Optional[list] = None


@dataclass
class StudySection:
    factor: float = 1.02
    mean_factor: float = 1.10
    std_factor: float = 1.10
    k_chains: int = 3
    multi_chain_burn_in: int = 50_000
    n_t_values: list = field(default_factory=lambda: [2 ** j for j in range(6, 13)])
    datasets: dict = field(default_factory=dict)
    prior_table: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    setup: ThermalSetup = field(default_factory=ThermalSetup)
    data: DataSection = field(default_factory=DataSection)
    discretization: Discretization = field(default_factory=lambda: Discretization(24, 512))
    model: ModelSection = field(default_factory=ModelSection)
    prior: PriorSpec = field(default_factory=PriorSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    study: StudySection = field(default_factory=StudySection)
    seed: int = 0
    threads: int = 1

    def refinement_config(self) -> RefinementConfig:
        """Refinement settings sharing the top-level prior and optimizer."""
        return replace(self.refinement, prior=self.prior, optimizer=self.optimizer)

    def chain_config(self) -> ChainConfig:
        return replace(self.chain, seed=derive_seed(self.seed, "chain"))

    def to_dict(self) -> dict:
        ref = self.refinement.to_dict()
        ref.pop("prior")
        ref.pop("optimizer")
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "threads": self.threads,
            "setup": self.setup.to_dict(),
            "data": asdict(self.data),
            "discretization": asdict(self.discretization),
            "model": asdict(self.model),
            "prior": asdict(self.prior),
            "optimizer": asdict(self.optimizer),
            "refinement": ref,
            "chain": asdict(self.chain),
            "study": asdict(self.study),
        }

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        d = dict(d or {})
        d.pop("schema_version", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        def build(kind, section):
            value = d.get(section) or {}
            if not isinstance(value, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            try:
                if kind is ThermalSetup:
                    return ThermalSetup.from_dict(value)
                if kind is RefinementConfig:
                    return RefinementConfig.from_dict(value)
                names = {f.name for f in fields(kind)}
                extra = set(value) - names
                if extra:
                    raise ConfigError(f"unknown fields in {section!r}: {sorted(extra)}")
                return kind(**value)
            except TypeError as exc:
                raise ConfigError(f"section {section!r}: {exc}") from exc

        disc = d.get("discretization") or {}
        try:
            out = cls(
                setup=build(ThermalSetup, "setup"),
                data=build(DataSection, "data"),
                discretization=Discretization(int(disc.get("n_e", 24)), int(disc.get("n_t", 512))),
                model=build(ModelSection, "model"),
                prior=build(PriorSpec, "prior"),
                optimizer=build(OptimizerConfig, "optimizer"),
                refinement=build(RefinementConfig, "refinement"),
                chain=build(ChainConfig, "chain"),
                study=build(StudySection, "study"),
                seed=int(d.get("seed", 0)),
                threads=int(d.get("threads", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if out.threads < 1:
            raise ConfigError("threads must be >= 1")
        if out.data.thin < 1:
            raise ConfigError("data.thin must be >= 1")
        return out


def load_config(path=None, seed: Optional[int] = None, threads: Optional[int] = None,
                bic_only: Optional[bool] = None) -> RunConfig:
    """Read a YAML config (or defaults) and apply command-line overrides."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
    cfg = RunConfig.from_dict(raw)
    if seed is not None:
        cfg.seed = int(seed)
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.threads = int(threads)
    if bic_only:
        cfg.refinement = replace(cfg.refinement, bic_only=True)
    return cfg
