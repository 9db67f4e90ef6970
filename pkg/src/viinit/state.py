"""Solver options and the initialization result shared by both closed-form solvers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .core import GRAVITY, gravity_rotation


@dataclass(frozen=True)
class SolverOptions:
    """
    Options of the closed-form solvers.

    Attributes
    ----------
    estimate_accel_bias : bool
        Solve the 9x9 system (velocity, gravity, accelerometer bias) instead of 6x6.
    enforce_gravity_norm : bool
        Project the solution onto ``|g0| = gamma`` with one Gauss-Newton step.
    gamma : float
        Gravity magnitude in m/s^2.
    min_observations_per_track : int
        Shorter tracks are ignored.
    condition_warn_threshold : float
        Condition number of the reduced system above which the result is flagged.
    singular_threshold : float
        Condition number above which the solve is refused (:class:`IllConditioned`).
    all_pairs : bool
        Pairwise solver only: pair every observation with every other one
        instead of with the first observation of its track.
    """

    estimate_accel_bias: bool = False
    enforce_gravity_norm: bool = False
    gamma: float = GRAVITY
    min_observations_per_track: int = 2
    condition_warn_threshold: float = 1e8
    singular_threshold: float = 1e14
    all_pairs: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.min_observations_per_track < 2:
            raise ValueError("min_observations_per_track must be >= 2")

    @property
    def state_dim(self) -> int:
        return 9 if self.estimate_accel_bias else 6


@dataclass(eq=False)
class InitState:
    """
    Visual-inertial initialization result, expressed in the RCS.

    ``b_a`` follows the additive convention of the kinematic model: it is
    added to the accelerometer readings, so it equals the negative of the
    sensor bias. ``b_g`` is subtracted from the gyroscope readings.
    """

    v0: NDArray
    g0: NDArray
    b_a: NDArray = field(default_factory=lambda: np.zeros(3))
    b_g: NDArray = field(default_factory=lambda: np.zeros(3))
    points: dict[int, NDArray] = field(default_factory=dict)
    depths: dict[tuple[int, int], float] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def R_W(self) -> NDArray:
        """World-to-RCS rotation (yaw fixed to zero)."""
        return gravity_rotation(self.g0, float(np.linalg.norm(self.g0)))

    def to_dict(self) -> dict:
        return {
            "v0": np.asarray(self.v0).tolist(),
            "g0": np.asarray(self.g0).tolist(),
            "b_a": np.asarray(self.b_a).tolist(),
            "b_g": np.asarray(self.b_g).tolist(),
            "R_W": self.R_W.reshape(-1).tolist(),
            "points": {str(k): np.asarray(v).tolist() for k, v in self.points.items()},
            "depths": [[k[0], k[1], float(v)] for k, v in self.depths.items()],
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InitState":
        return cls(
            v0=np.asarray(d["v0"], dtype=float),
            g0=np.asarray(d["g0"], dtype=float),
            b_a=np.asarray(d.get("b_a", [0, 0, 0]), dtype=float),
            b_g=np.asarray(d.get("b_g", [0, 0, 0]), dtype=float),
            points={int(k): np.asarray(v, dtype=float) for k, v in d.get("points", {}).items()},
            depths={(int(a), int(b)): float(v) for a, b, v in d.get("depths", [])},
            diagnostics=dict(d.get("diagnostics", {})),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "InitState":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return str(v)
    return v
