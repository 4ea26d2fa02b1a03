"""Measurement datasets: synthetic generation, CSV ingestion and subsetting."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .conductivity import ConductivityModel
from .errors import ConfigError, DataError
from .forward import (Discretization, SensorProbe, ThermalSetup, min_elements_for_timesteps,
                      solve)
from .probabilistic import SensorErrorModel

MEASUREMENT_HEADER = ["time_s", "sensor1_C", "sensor2_C", "sensor3_C", "sensor4_C", "ambient_C"]


def _data_file(name):
    return resources.files("thermocal").joinpath("data").joinpath(name)


def default_error_model() -> SensorErrorModel:
    """Digitised DS18B20 error curves shipped with the package."""
    with resources.as_file(_data_file("ds18b20_error.csv")) as path:
        return SensorErrorModel.from_csv(path)


def default_ground_truth() -> "GroundTruthConductivity":
    with resources.as_file(_data_file("ground_truth_anchors.csv")) as path:
        return GroundTruthConductivity.from_csv(path)


class GroundTruthConductivity:
    """Natural cubic spline through (T, k) anchors, clamped outside them."""

    def __init__(self, temps, k_values):
        self.temps = np.asarray(temps, dtype=float).reshape(-1)
        self.k_values = np.asarray(k_values, dtype=float).reshape(-1)
        if self.temps.size != self.k_values.size or self.temps.size < 2:
            raise ConfigError("need at least two matching anchor temperatures and conductivities")
        if np.any(np.diff(self.temps) <= 0):
            raise ConfigError("anchor temperatures must be strictly increasing")
        self.spline = CubicSpline(self.temps, self.k_values, bc_type="natural")
        fine = np.linspace(self.temps[0], self.temps[-1], 2001)
        if np.any(self.spline(fine) <= 0):
            raise ConfigError("ground-truth spline is not positive over its anchor range")

    def __call__(self, T):
        out = self.spline(np.clip(T, self.temps[0], self.temps[-1]))
        return float(out) if np.ndim(out) == 0 else out

    def discretize(self, n_s, T_min, T_max) -> ConductivityModel:
        """Piecewise-linear model interpolating the spline at equally spaced knots."""
        knots = np.linspace(T_min, T_max, n_s + 1)
        return ConductivityModel(T_min, T_max, self(knots))

    @classmethod
    def from_csv(cls, path) -> "GroundTruthConductivity":
        rows = _read_rows(path, ["temp_C", "k_W_per_mC"])
        return cls(rows[:, 0], rows[:, 1])


@dataclass
class Dataset:
    """Temperature readings of several sensors at shared times.

    ``temperatures`` has shape ``(n_sensors, n_readings)``; the data vector
    ``d`` concatenates the sensors one after another.
    """

    times: np.ndarray
    temperatures: np.ndarray
    sensor_positions: tuple
    error_model: Optional[SensorErrorModel] = None
    ambient: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.temperatures = np.atleast_2d(np.asarray(self.temperatures, dtype=float))
        self.sensor_positions = tuple(float(x) for x in self.sensor_positions)
        if self.times.size == 0:
            raise DataError("dataset has no readings")
        if self.temperatures.shape != (len(self.sensor_positions), self.times.size):
            raise DataError(f"temperatures have shape {self.temperatures.shape}, expected "
                            f"({len(self.sensor_positions)}, {self.times.size})")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("measurement times must be strictly increasing")
        if not np.all(np.isfinite(self.temperatures)):
            raise DataError("temperatures contain NaN or infinite values")
        if self.ambient is not None:
            self.ambient = np.asarray(self.ambient, dtype=float).reshape(-1)
            if self.ambient.shape != self.times.shape or not np.all(np.isfinite(self.ambient)):
                raise DataError("ambient series must be finite and match the times")

    @property
    def d(self) -> np.ndarray:
        return self.temperatures.reshape(-1)

    @property
    def n_d(self) -> int:
        return self.temperatures.size

    @property
    def n_readings(self) -> int:
        return self.times.size

    @property
    def T_min(self) -> float:
        return float(self.temperatures.min())

    @property
    def T_max(self) -> float:
        return float(self.temperatures.max())

    def with_error_model(self, error_model) -> "Dataset":
        return replace(self, error_model=error_model)

    def apply_ambient(self, setup: ThermalSetup) -> ThermalSetup:
        """Setup driven by the recorded ambient series, starting from T_inf(0)."""
        if self.ambient is None:
            raise DataError("dataset carries no ambient series")
        times, values = self.times, self.ambient
        if times[0] > 0:
            times, values = np.r_[0.0, times], np.r_[values[0], values]
        return replace(setup, T_inf=(times, values), T0=None)


def _read_rows(path, header):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            found = [h.strip() for h in next(reader, [])]
            rows = [r for r in reader if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    missing = [h for h in header if h not in found]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    cols = [found.index(h) for h in header]
    try:
        values = np.array([[float(r[c]) for c in cols] for r in rows], dtype=float)
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from exc
    if values.size == 0:
        raise DataError(f"{path}: no data rows")
    if np.any(np.isnan(values)):
        raise DataError(f"{path}: NaN values")
    return values


def ingest_csv(path, sensor_positions=None, error_model=None) -> Dataset:
    """Read a ``time_s,sensor1_C..sensor4_C,ambient_C`` measurement file."""
    rows = _read_rows(path, MEASUREMENT_HEADER)
    if sensor_positions is None:
        sensor_positions = ThermalSetup().sensor_positions
    return Dataset(rows[:, 0], rows[:, 1:5].T, tuple(sensor_positions), error_model, rows[:, 5])


def export_csv(dataset: Dataset, path):
    if dataset.temperatures.shape[0] != 4:
        raise DataError("the measurement CSV format holds exactly four sensors")
    if dataset.ambient is None:
        raise DataError("the measurement CSV format needs an ambient series")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MEASUREMENT_HEADER)
        for i, t in enumerate(dataset.times):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in dataset.temperatures[:, i]]
                       + [repr(float(dataset.ambient[i]))])


def default_schedule(t_total=43200.0, cadence=20.0) -> np.ndarray:
    """Reading times ``cadence, 2 cadence, ..., t_total``."""
    n = int(round(t_total / cadence))
    return cadence * np.arange(1, n + 1)


def default_reference_disc(ground_truth, setup: ThermalSetup, n_t=8640) -> Discretization:
    k_min = float(np.min(ground_truth(np.linspace(ground_truth.temps[0], ground_truth.temps[-1], 2001))))
    n_e = max(128, min_elements_for_timesteps(n_t, k_min, setup))
    return Discretization(n_e, n_t)


def synthesize(ground_truth, setup: ThermalSetup, error_model: SensorErrorModel, schedule=None,
               reference_disc: Optional[Discretization] = None, seed: int = 0,
               noise: bool = True) -> Dataset:
    """Simulated measurements: high-fidelity forward solve plus Gaussian sensor noise.

    The noise mean and std are read off the error curves at the simulated
    temperature.  ``noise=False`` returns the model predictions unchanged.
    """
    schedule = default_schedule(setup.t_total) if schedule is None else np.asarray(schedule, float)
    if schedule.size == 0 or schedule.min() < 0 or schedule.max() > setup.t_total:
        raise DataError("measurement schedule must lie within the simulated time span")
    if reference_disc is None:
        reference_disc = default_reference_disc(ground_truth, setup)
    traj = solve(setup, ground_truth, reference_disc)
    f = SensorProbe(setup, reference_disc, schedule)(traj).reshape(len(setup.sensor_positions), -1)
    if noise:
        rng = np.random.default_rng(seed)
        mu, sigma = error_model.at(f)
        f = f + mu + sigma * rng.standard_normal(f.shape)
    ambient = setup.ambient_at(schedule)
    return Dataset(schedule, f, setup.sensor_positions, error_model, ambient)


def subset_steady_state(dataset: Dataset, fraction: float = 0.25) -> Dataset:
    """Keep the final ``ceil(fraction * n)`` readings of every sensor."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    keep = math.ceil(fraction * dataset.n_readings - 1e-9)
    if keep < 1:
        raise DataError("steady-state subset is empty")
    sl = slice(dataset.n_readings - keep, None)
    ambient = None if dataset.ambient is None else dataset.ambient[sl]
    return replace(dataset, times=dataset.times[sl], temperatures=dataset.temperatures[:, sl],
                   ambient=ambient)


def thin(dataset: Dataset, every: int) -> Dataset:
    """Keep every ``every``-th reading, counted back from the last one."""
    if every < 1:
        raise ConfigError("every must be >= 1")
    sl = slice(dataset.n_readings - 1 - ((dataset.n_readings - 1) // every) * every, None, every)
    ambient = None if dataset.ambient is None else dataset.ambient[sl]
    return replace(dataset, times=dataset.times[sl], temperatures=dataset.temperatures[:, sl],
                   ambient=ambient)
