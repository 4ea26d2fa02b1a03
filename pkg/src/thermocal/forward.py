"""1D transient heat conduction with temperature-dependent conductivity.

Linear finite elements on a uniform mesh, backward Euler in time.  The rod
exchanges heat with a source at ``x = 0`` and with the ambient at ``x = L``
(Robin conditions) and loses heat laterally at rate ``2 h_side / R``.

Per time step the tridiagonal system

    [(1/dt + beta) C + K_m] T_{m+1} = (1/dt) C T_m + s

is solved with the Thomas algorithm, where ``C = rho c_p M`` uses the
consistent linear-element mass matrix and ``beta = 2 h_side / (R rho c_p)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numba
import numpy as np

from .conductivity import ConductivityModel, element_temperatures
from .errors import ConfigError, DataError, NumericalError

Conductivity = Union[ConductivityModel, Callable[[np.ndarray], np.ndarray]]

SENSOR_POSITIONS = (0.005, 0.0258, 0.045, 0.0665)


@dataclass(frozen=True)
class ThermalSetup:
    """Geometry, material properties and boundary conditions (SI units, degC).

    ``T_inf`` is either a constant or a ``(times, values)`` pair that is
    interpolated linearly in time.  ``T0 = None`` starts the rod at the
    ambient temperature ``T_inf(0)``.
    """

    R: float = 0.0286
    L: float = 0.093
    sensor_positions: Sequence[float] = SENSOR_POSITIONS
    rho: float = 900.0
    cp: float = 2100.0
    h_source: float = 25.0
    h_side: float = 1.0
    h_inf: float = 10.0
    T_source: float = 57.0
    T_inf: Union[float, tuple] = 20.0
    T0: Optional[float] = 20.0
    t_total: float = 43200.0

    def __post_init__(self):
        pos = np.array(self.sensor_positions, dtype=float).reshape(-1)
        object.__setattr__(self, "sensor_positions", tuple(float(x) for x in pos))
        for name in ("R", "L", "rho", "cp", "t_total"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("h_source", "h_side", "h_inf"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        if pos.size and (pos.min() < 0 or pos.max() > self.L):
            raise ConfigError("sensor positions must lie in [0, L]")
        if np.any(np.diff(pos) <= 0):
            raise ConfigError("sensor positions must be strictly increasing")
        times, values = self.ambient_trajectory
        if times.size < 1 or np.any(np.diff(times) <= 0) or not np.all(np.isfinite(values)):
            raise ConfigError("ambient trajectory needs strictly increasing times and finite values")

    @property
    def ambient_trajectory(self):
        if np.ndim(self.T_inf) == 0:
            return np.array([0.0, self.t_total]), np.array([float(self.T_inf)] * 2)
        times, values = self.T_inf
        return np.asarray(times, dtype=float), np.asarray(values, dtype=float)

    def ambient_at(self, t):
        times, values = self.ambient_trajectory
        return np.interp(t, times, values)

    @property
    def initial_temperature(self) -> float:
        return float(self.ambient_at(0.0)) if self.T0 is None else float(self.T0)

    @property
    def beta(self) -> float:
        return 2.0 * self.h_side / (self.R * self.rho * self.cp)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["sensor_positions"] = list(self.sensor_positions)
        if np.ndim(self.T_inf) != 0:
            times, values = self.ambient_trajectory
            d["T_inf"] = {"times": times.tolist(), "values": values.tolist()}
        return d

    @classmethod
    def from_dict(cls, d) -> "ThermalSetup":
        d = dict(d)
        if isinstance(d.get("T_inf"), dict):
            d["T_inf"] = (d["T_inf"]["times"], d["T_inf"]["values"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown setup fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Discretization:
    n_e: int
    n_t: int

    def __post_init__(self):
        if int(self.n_e) != self.n_e or int(self.n_t) != self.n_t:
            raise ConfigError("n_e and n_t must be integers")
        if self.n_e < 1 or self.n_t < 1:
            raise ConfigError(f"n_e and n_t must be >= 1, got ({self.n_e}, {self.n_t})")
        object.__setattr__(self, "n_e", int(self.n_e))
        object.__setattr__(self, "n_t", int(self.n_t))

    def dx(self, setup: ThermalSetup) -> float:
        return setup.L / self.n_e

    def dt(self, setup: ThermalSetup) -> float:
        return setup.t_total / self.n_t


@dataclass
class TemperatureTrajectory:
    """Nodal temperatures, row ``m`` at time ``t_m = m dt``."""

    nodal_values: np.ndarray
    times: np.ndarray
    L: float
    picard_iterations: Optional[np.ndarray] = None
    picard_converged: Optional[np.ndarray] = None

    @property
    def n_t(self) -> int:
        return self.nodal_values.shape[0] - 1

    @property
    def n_e(self) -> int:
        return self.nodal_values.shape[1] - 1

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.n_e + 1)


# ---------------------------------------------------------------------------
# compiled kernels

@numba.njit(cache=True, nogil=True)
def _thomas(sub, diag, sup, rhs, out, cp, dp):
    """Solve a tridiagonal system into ``out``; False on a zero pivot."""
    n = diag.shape[0]
    piv = diag[0]
    if not abs(piv) > 1e-300:
        return False
    cp[0] = sup[0] / piv if n > 1 else 0.0
    dp[0] = rhs[0] / piv
    for i in range(1, n):
        piv = diag[i] - sub[i - 1] * cp[i - 1]
        if not abs(piv) > 1e-300:
            return False
        if i < n - 1:
            cp[i] = sup[i] / piv
        dp[i] = (rhs[i] - sub[i - 1] * dp[i - 1]) / piv
    out[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        out[i] = dp[i] - cp[i] * out[i + 1]
    for i in range(n):
        if not math.isfinite(out[i]):
            return False
    return True


@numba.njit(cache=True, nogil=True)
def _step(T_m, k_el, tinf, dt, dx, rho_cp, beta, h_src, T_src, h_inf, out, work):
    n = T_m.shape[0]
    ne = n - 1
    for e in range(ne):
        if not k_el[e] > 0.0 or not math.isfinite(k_el[e]):
            return False
    a = (1.0 / dt + beta) * rho_cp
    mdiag = dx / 3.0
    moff = dx / 6.0
    diag = work[0]
    off = work[1]
    rhs = work[2]
    for i in range(n):
        diag[i] = 0.0
        rhs[i] = 0.0
    for e in range(ne):
        ke = k_el[e] / dx
        diag[e] += a * mdiag + ke
        diag[e + 1] += a * mdiag + ke
        off[e] = a * moff - ke
        # (rho c_p / dt) M T_m + beta rho c_p M 1 T_inf, element by element
        c = rho_cp / dt
        rhs[e] += c * (mdiag * T_m[e] + moff * T_m[e + 1]) + beta * rho_cp * 0.5 * dx * tinf
        rhs[e + 1] += c * (moff * T_m[e] + mdiag * T_m[e + 1]) + beta * rho_cp * 0.5 * dx * tinf
    diag[0] += h_src
    rhs[0] += h_src * T_src
    diag[ne] += h_inf
    rhs[ne] += h_inf * tinf
    return _thomas(off, diag, off, rhs, out, work[3], work[4])


@numba.njit(cache=True, nogil=True)
def _pl_eval(T, tmin, tmax, kvals):
    ns = kvals.shape[0] - 1
    u = (T - tmin) / (tmax - tmin) * ns
    if not u > 0.0:
        return kvals[0]
    if u >= ns:
        return kvals[ns]
    i = int(u)
    w = u - i
    return (1.0 - w) * kvals[i] + w * kvals[i + 1]


@numba.njit(cache=True, nogil=True)
def _elem_k(T, tmin, tmax, kvals, k_el):
    for e in range(k_el.shape[0]):
        k_el[e] = _pl_eval(0.5 * (T[e] + T[e + 1]), tmin, tmax, kvals)


@numba.njit(cache=True, nogil=True)
def _march(traj, tmin, tmax, kvals, tinf, dt, dx, rho_cp, beta, h_src, T_src, h_inf,
           implicit, max_iter, rel_tol, iters, conv):
    """Fill rows 1..n_t of ``traj``; return the failing step or -1."""
    n_t = traj.shape[0] - 1
    n = traj.shape[1]
    k_el = np.empty(n - 1)
    prev = np.empty(n)
    work = np.empty((5, n))
    for m in range(n_t):
        _elem_k(traj[m], tmin, tmax, kvals, k_el)
        if not _step(traj[m], k_el, tinf[m + 1], dt, dx, rho_cp, beta, h_src, T_src, h_inf, traj[m + 1], work):
            return m + 1
        if implicit:
            conv[m + 1] = False
            for j in range(1, max_iter + 1):
                prev[:] = traj[m + 1]
                _elem_k(prev, tmin, tmax, kvals, k_el)
                if not _step(traj[m], k_el, tinf[m + 1], dt, dx, rho_cp, beta, h_src, T_src, h_inf, traj[m + 1], work):
                    return m + 1
                num = 0.0
                den = 0.0
                for i in range(n):
                    num += (traj[m + 1, i] - prev[i]) ** 2
                    den += traj[m + 1, i] ** 2
                iters[m + 1] = j
                if math.sqrt(num) <= rel_tol * math.sqrt(den):
                    conv[m + 1] = True
                    break
    return -1


# ---------------------------------------------------------------------------
# public API

def _phys(setup: ThermalSetup, disc: Discretization):
    return (disc.dt(setup), disc.dx(setup), setup.rho * setup.cp, setup.beta,
            setup.h_source, setup.T_source, setup.h_inf)


def _check_k(k_el, where):
    if not np.all(np.isfinite(k_el)) or np.any(k_el <= 0):
        raise NumericalError(f"non-positive or non-finite conductivity {where}")


def assemble_and_step(T_m, k_model: Conductivity, setup: ThermalSetup, disc: Discretization,
                      t_next: Optional[float] = None) -> np.ndarray:
    """Advance nodal temperatures by one backward Euler step.

    Element conductivities come from the average nodal temperatures of
    ``T_m`` (explicit treatment).  ``t_next`` is the time of the new level,
    used for the ambient temperature; it defaults to the first step ``dt``.
    """
    T_m = np.ascontiguousarray(T_m, dtype=float)
    if T_m.shape != (disc.n_e + 1,):
        raise ConfigError(f"expected {disc.n_e + 1} nodal values, got {T_m.shape}")
    dt = disc.dt(setup)
    t_next = dt if t_next is None else float(t_next)
    k_el = np.ascontiguousarray(k_model(element_temperatures(T_m)), dtype=float)
    _check_k(k_el, "in assemble_and_step")
    out = np.empty_like(T_m)
    ok = _step(T_m, k_el, float(setup.ambient_at(t_next)), *_phys(setup, disc), out,
               np.empty((5, T_m.size)))
    if not ok:
        raise NumericalError("singular or non-finite system in assemble_and_step")
    return out


def _march_generic(traj, k_fn, tinf, phys, implicit, max_iter, rel_tol, iters, conv):
    n_t = traj.shape[0] - 1
    work = np.empty((5, traj.shape[1]))
    for m in range(n_t):
        k_el = np.ascontiguousarray(k_fn(element_temperatures(traj[m])), dtype=float)
        if not _step(traj[m], k_el, tinf[m + 1], *phys, traj[m + 1], work):
            return m + 1
        if implicit:
            conv[m + 1] = False
            for j in range(1, max_iter + 1):
                prev = traj[m + 1].copy()
                k_el = np.ascontiguousarray(k_fn(element_temperatures(prev)), dtype=float)
                if not _step(traj[m], k_el, tinf[m + 1], *phys, traj[m + 1], work):
                    return m + 1
                iters[m + 1] = j
                if np.linalg.norm(traj[m + 1] - prev) <= rel_tol * np.linalg.norm(traj[m + 1]):
                    conv[m + 1] = True
                    break
    return -1


def _run(setup, k_model, disc, implicit, max_iter, rel_tol):
    n_t, n_e = disc.n_t, disc.n_e
    times = np.arange(n_t + 1) * disc.dt(setup)
    tinf = np.ascontiguousarray(setup.ambient_at(times), dtype=float)
    traj = np.empty((n_t + 1, n_e + 1))
    traj[0] = setup.initial_temperature
    iters = np.zeros(n_t + 1, dtype=np.int64)
    conv = np.ones(n_t + 1, dtype=np.bool_)
    phys = _phys(setup, disc)
    if isinstance(k_model, ConductivityModel):
        kv = np.ascontiguousarray(k_model.k_values)
        failed = _march(traj, float(k_model.T_min), float(k_model.T_max), kv, tinf, *phys,
                        implicit, int(max_iter), float(rel_tol), iters, conv)
    else:
        failed = _march_generic(traj, k_model, tinf, phys, implicit, max_iter, rel_tol, iters, conv)
    if failed >= 0:
        raise NumericalError(f"forward solve failed at time step {failed} of {n_t} "
                             f"(n_e={n_e}): singular, non-positive conductivity or non-finite result")
    out = TemperatureTrajectory(traj, times, setup.L)
    if implicit:
        out.picard_iterations = iters
        out.picard_converged = conv
    return out


def solve(setup: ThermalSetup, k_model: Conductivity, disc: Discretization) -> TemperatureTrajectory:
    """March from the initial condition over ``n_t`` explicit-conductivity steps."""
    return _run(setup, k_model, disc, False, 1, 1.0)


def solve_implicit(setup: ThermalSetup, k_model: Conductivity, disc: Discretization,
                   max_iter: int = 50, rel_tol: float = 1e-9) -> TemperatureTrajectory:
    """Backward Euler with conductivity evaluated at the new time level.

    Each step starts from the explicit solution and applies Picard updates
    until the relative change of ``T_{m+1}`` drops to ``rel_tol``.  Steps
    that hit ``max_iter`` are flagged in ``picard_converged`` rather than
    raising.
    """
    if max_iter < 1 or not rel_tol > 0:
        raise ConfigError("max_iter must be >= 1 and rel_tol > 0")
    return _run(setup, k_model, disc, True, max_iter, rel_tol)


def _grid_weights(points, spacing, n_cells):
    u = np.asarray(points, dtype=float) / spacing
    near = np.abs(u - np.round(u)) < 1e-9
    u = np.where(near, np.round(u), u)
    idx = np.clip(np.floor(u).astype(np.int64), 0, n_cells - 1)
    return idx, u - idx


class SensorProbe:
    """Precomputed space/time interpolation from trajectories to the data vector.

    Output is sensor-major: all times of sensor 1, then sensor 2, ...
    """

    def __init__(self, setup: ThermalSetup, disc: Discretization, measurement_times):
        times = np.asarray(measurement_times, dtype=float).reshape(-1)
        if times.size and (times.min() < 0 or times.max() > setup.t_total * (1 + 1e-12)):
            raise DataError(f"measurement times must lie in [0, {setup.t_total}] s")
        self.n_e, self.n_t = disc.n_e, disc.n_t
        self.jx, self.wx = _grid_weights(setup.sensor_positions, disc.dx(setup), disc.n_e)
        self.jt, self.wt = _grid_weights(np.minimum(times, setup.t_total), disc.dt(setup), disc.n_t)

    def __call__(self, nodal_values) -> np.ndarray:
        v = nodal_values.nodal_values if hasattr(nodal_values, "nodal_values") else nodal_values
        if v.shape != (self.n_t + 1, self.n_e + 1):
            raise ConfigError("trajectory shape does not match the probe discretization")
        # space first: (n_t + 1, n_sensors)
        at_sensors = v[:, self.jx] * (1.0 - self.wx) + v[:, self.jx + 1] * self.wx
        wt = self.wt[:, None]
        series = at_sensors[self.jt] * (1.0 - wt) + at_sensors[self.jt + 1] * wt
        return series.T.reshape(-1)


def predict_sensors(traj: TemperatureTrajectory, setup: ThermalSetup, measurement_times) -> np.ndarray:
    """Model temperatures at every (sensor, time) pair, sensor-major."""
    disc = Discretization(traj.n_e, traj.n_t)
    return SensorProbe(setup, disc, measurement_times)(traj)


def element_bound(n_t: int, k_min: float, setup: ThermalSetup) -> float:
    """Lower bound on n_e for ``n_t`` backward Euler steps (not rounded)."""
    if not k_min > 0:
        raise ConfigError(f"k_min must be positive, got {k_min}")
    if n_t < 1:
        raise ConfigError("n_t must be >= 1")
    return math.sqrt(n_t * setup.L ** 2 * setup.rho * setup.cp / (6.0 * k_min * setup.t_total))


def min_elements_for_timesteps(n_t: int, k_min: float, setup: ThermalSetup) -> int:
    """Smallest element count strictly above :func:`element_bound`."""
    return max(1, math.floor(element_bound(n_t, k_min, setup)) + 1)
