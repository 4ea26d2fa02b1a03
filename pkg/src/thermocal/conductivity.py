"""Piecewise-linear temperature-dependent conductivity model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ConductivityModel:
    """Conductivity k(T) interpolated between ``n_s + 1`` equally spaced knots.

    Outside ``[T_min, T_max]`` the end values are used (clamped extrapolation).
    """

    T_min: float
    T_max: float
    k_values: np.ndarray

    def __post_init__(self):
        k = np.array(self.k_values, dtype=float).reshape(-1)
        k.setflags(write=False)
        object.__setattr__(self, "k_values", k)
        if k.size < 2:
            raise ConfigError("a conductivity model needs at least two knots")
        if not self.T_max > self.T_min:
            raise ConfigError(f"T_max ({self.T_max}) must exceed T_min ({self.T_min})")
        if not np.all(np.isfinite(k)) or np.any(k <= 0):
            raise ConfigError("conductivity values must be finite and positive")

    @classmethod
    def constant(cls, k, T_min, T_max, n_s=1):
        return cls(T_min, T_max, np.full(n_s + 1, float(k)))

    @property
    def n_s(self) -> int:
        return self.k_values.size - 1

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(self.T_min, self.T_max, self.n_s + 1)

    def __call__(self, T):
        return evaluate(self, T)

    def with_values(self, k_values) -> "ConductivityModel":
        return ConductivityModel(self.T_min, self.T_max, k_values)

    def to_dict(self) -> dict:
        return {
            "T_min": float(self.T_min),
            "T_max": float(self.T_max),
            "n_s": self.n_s,
            "k_values": [float(v) for v in self.k_values],
        }

    @classmethod
    def from_dict(cls, d) -> "ConductivityModel":
        model = cls(float(d["T_min"]), float(d["T_max"]), d["k_values"])
        if "n_s" in d and int(d["n_s"]) != model.n_s:
            raise ConfigError("n_s does not match the number of k_values")
        return model


def evaluate(model: ConductivityModel, T):
    """Conductivity at temperature(s) ``T``; scalar in, scalar out."""
    # np.interp clamps to the end values outside the knot range
    out = np.interp(T, model.knots, model.k_values)
    return float(out) if np.ndim(out) == 0 else out


def refine(model: ConductivityModel) -> ConductivityModel:
    """Double the segment count, inserting midpoints on the current curve."""
    n_s = model.n_s
    fine = np.linspace(model.T_min, model.T_max, 2 * n_s + 1)
    return ConductivityModel(model.T_min, model.T_max, evaluate(model, fine))


def element_temperatures(nodal_values) -> np.ndarray:
    """Average of the two nodal temperatures of every element."""
    nodal_values = np.asarray(nodal_values, dtype=float)
    return 0.5 * (nodal_values[..., 1:] + nodal_values[..., :-1])


def k_min_over_elements(model, traj) -> float:
    """Smallest element conductivity seen anywhere along a trajectory.

    ``model`` may be a :class:`ConductivityModel` or any vectorised callable.
    """
    values = traj.nodal_values if hasattr(traj, "nodal_values") else np.asarray(traj)
    if values.size == 0:
        raise ConfigError("empty trajectory")
    T_el = element_temperatures(values)
    return float(np.min(model(T_el.ravel())))
