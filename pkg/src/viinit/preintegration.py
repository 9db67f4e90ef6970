"""
Discrete IMU preintegration.

The accelerometer and gyroscope readings are held constant over each sampling
interval ``[k T_s, (k+1) T_s)``. With ``p_I(0) = 0`` and initial velocity
``v0`` the IMU position at ``t = n T_s`` is::

    p_I(t) = t v0 + t^2/2 g0 + T_s^2/2 sum_{k<n} beta_k R_k (alpha_k + b_a)
    beta_k = 2 (n - k) - 1

and ``R_k = exp(w_0 T_s) ... exp(w_{k-1} T_s)``. Feature times that fall
between two samples add a partial interval of length ``h = t - n T_s``, which
extends the weights to ``T_s^2/2 beta_k + T_s h`` for ``k < n`` and ``h^2/2``
for the sample ``n`` opening the partial interval.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import Camera, OutOfRange, exp_so3, right_jacobian_so3, skew


@dataclass(frozen=True)
class ImuSample:
    time: float
    gyro: NDArray
    accel: NDArray


@dataclass(frozen=True, eq=False)
class ImuWindow:
    """
    IMU readings of one initialization window.

    Parameters
    ----------
    times : ndarray, shape (K,)
        Sample times in seconds; the first one must be 0.
    gyro : ndarray, shape (K, 3)
        Angular rate in rad/s (IMU frame).
    accel : ndarray, shape (K, 3)
        Specific force in m/s^2 (IMU frame).
    imu_period : float
        Nominal sampling period ``T_s``.
    """

    times: NDArray
    gyro: NDArray
    accel: NDArray
    imu_period: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "gyro", gyro)
        object.__setattr__(self, "accel", accel)
        if not (len(times) == len(gyro) == len(accel)):
            raise ValueError("times, gyro and accel lengths differ")
        if len(times) < 2:
            raise ValueError("an IMU window needs at least 2 samples")
        if times[0] != 0.0:
            raise ValueError("the first IMU sample must be at t = 0")
        if not self.imu_period > 0:
            raise ValueError("imu_period must be positive")
        if not (np.all(np.isfinite(gyro)) and np.all(np.isfinite(accel))):
            raise ValueError("non-finite IMU readings")
        dt = np.diff(times)
        if np.any(np.abs(dt - self.imu_period) > 0.1 * self.imu_period):
            raise ValueError("IMU samples are not uniformly spaced at imu_period")

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample], imu_period: float) -> "ImuWindow":
        return cls(
            times=np.array([s.time for s in samples]),
            gyro=np.array([s.gyro for s in samples]),
            accel=np.array([s.accel for s in samples]),
            imu_period=imu_period,
        )

    @property
    def samples(self) -> list[ImuSample]:
        return [ImuSample(t, g, a) for t, g, a in zip(self.times, self.gyro, self.accel)]

    def __len__(self) -> int:
        return len(self.times)

    @property
    def duration(self) -> float:
        return (len(self.times) - 1) * self.imu_period

    def interpolate(self, t: float) -> ImuSample:
        """Linearly interpolated (virtual) sample at time ``t``."""
        if t < 0 or t > self.times[-1]:
            raise OutOfRange(f"t={t} outside [0, {self.times[-1]}]")
        g = np.array([np.interp(t, self.times, self.gyro[:, i]) for i in range(3)])
        a = np.array([np.interp(t, self.times, self.accel[:, i]) for i in range(3)])
        return ImuSample(float(t), g, a)


@dataclass(frozen=True, eq=False)
class Preintegral:
    """Preintegrated quantities at one observation time."""

    t: float
    R_I: NDArray
    B: NDArray
    accum: NDArray
    n: int


@dataclass(frozen=True, eq=False)
class Preintegrals:
    """Batched :class:`Preintegral`, one row per requested time."""

    t: NDArray  # (m,)
    R_I: NDArray  # (m, 3, 3)
    B: NDArray  # (m, 3, 3)
    accum: NDArray  # (m, 3)
    n: NDArray  # (m,)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Preintegral:
        return Preintegral(float(self.t[i]), self.R_I[i], self.B[i], self.accum[i], int(self.n[i]))


def beta(n: int, k: int) -> int:
    """Double-integration weight ``2 (n - k) - 1`` of sample ``k`` at sample ``n``."""
    if not 0 <= k < n:
        raise ValueError(f"beta needs 0 <= k < n, got n={n}, k={k}")
    return 2 * (n - k) - 1


def integrate_rotations(window: ImuWindow, b_g: ArrayLike | None = None) -> NDArray:
    """
    Orientation of the IMU at every sample, ``R_0 = I``.

    ``R_{k+1} = R_k exp((w_k - b_g) T_s)``, i.e. the earliest factor is leftmost.

    Returns
    -------
    ndarray, shape (K, 3, 3)
    """
    b_g = np.zeros(3) if b_g is None else np.asarray(b_g, dtype=float)
    steps = exp_so3((window.gyro[:-1] - b_g) * window.imu_period)
    R = np.empty((len(window), 3, 3))
    R[0] = np.eye(3)
    for k in range(len(steps)):
        R[k + 1] = R[k] @ steps[k]
    return R


def split_times(window: ImuWindow, times: ArrayLike) -> tuple[NDArray, NDArray]:
    """
    Index ``n`` of the last sample at or before each time and the remainder ``h``.

    Raises
    ------
    OutOfRange
        If a time is negative or after the last sample.
    """
    T = window.imu_period
    t = np.atleast_1d(np.asarray(times, dtype=float))
    last = len(window) - 1
    tol = 1e-9 * T
    if np.any(t < -tol) or np.any(t > last * T + tol):
        raise OutOfRange(f"times must lie within [0, {last * T}]")
    n = np.floor(t / T + 1e-9).astype(int)
    n = np.clip(n, 0, last)
    h = np.clip(t - n * T, 0.0, T)
    return n, h


def weighted_sum(values: NDArray, n: NDArray, h: NDArray, T: float) -> NDArray:
    """
    ``sum_k w_k(t) values_k`` for the double-integration weights of each time.

    ``values`` has shape (K, ...). Prefix sums make each lookup O(1).
    """
    K = len(values)
    idx = np.arange(K).reshape((K,) + (1,) * (values.ndim - 1))
    zero = np.zeros((1,) + values.shape[1:])
    S0 = np.concatenate([zero, np.cumsum(values, axis=0)])
    S1 = np.concatenate([zero, np.cumsum(idx * values, axis=0)])
    shape = (-1,) + (1,) * (values.ndim - 1)
    nn = n.reshape(shape).astype(float)
    hh = h.reshape(shape)
    full = 0.5 * T**2 * ((2.0 * nn - 1.0) * S0[n] - 2.0 * S1[n])
    return full + T * hh * S0[n] + 0.5 * hh**2 * values[n]


def preintegrate_many(
    window: ImuWindow,
    times: ArrayLike,
    b_g: ArrayLike | None = None,
    rotations: NDArray | None = None,
) -> Preintegrals:
    """
    Preintegrate the window at every time in ``times``.

    Parameters
    ----------
    window : ImuWindow
    times : array_like, shape (m,)
        Observation times in ``[0, last sample time]``.
    b_g : array_like, optional
        Gyroscope bias subtracted before integration.
    rotations : ndarray, optional
        Output of :func:`integrate_rotations` for the same ``b_g``, to skip
        recomputation.
    """
    b_g = np.zeros(3) if b_g is None else np.asarray(b_g, dtype=float)
    T = window.imu_period
    R = integrate_rotations(window, b_g) if rotations is None else rotations
    t = np.atleast_1d(np.asarray(times, dtype=float))
    n, h = split_times(window, t)

    tail = exp_so3((window.gyro[n] - b_g) * h[:, None])
    R_I = R[n] @ tail
    B = weighted_sum(R, n, h, T)
    accum = weighted_sum(np.einsum("kij,kj->ki", R, window.accel), n, h, T)
    return Preintegrals(t=t, R_I=R_I, B=B, accum=accum, n=n)


def preintegrate(window: ImuWindow, t_i: float, b_g: ArrayLike | None = None) -> Preintegral:
    """
    Preintegrated rotation ``R_I``, weighted rotation sum ``B`` and rotated
    acceleration accumulation at time ``t_i``.

    Examples
    --------
    With zero gyro, ``B == t_i**2 / 2 * I``.
    """
    return preintegrate_many(window, [t_i], b_g)[0]


def constant_vector(pre: Preintegral | Preintegrals, cam: Camera) -> NDArray:
    """``c = -R_I p_C^I - accum``; batched when ``pre`` is a :class:`Preintegrals`."""
    return -np.einsum("...ij,j->...i", pre.R_I, cam.p_C_I) - pre.accum


def rotation_bias_jacobians(
    window: ImuWindow, b_g: ArrayLike | None = None, rotations: NDArray | None = None
) -> NDArray:
    """
    Sensitivity of every sample orientation to the gyroscope bias.

    Returns ``J`` of shape (K, 3, 3) such that
    ``R_k(b_g + d) ~ R_k(b_g) exp(-J_k d)``.
    """
    b_g = np.zeros(3) if b_g is None else np.asarray(b_g, dtype=float)
    T = window.imu_period
    phi = (window.gyro[:-1] - b_g) * T
    E = exp_so3(phi)
    Jr = right_jacobian_so3(phi) * T
    J = np.zeros((len(window), 3, 3))
    for k in range(len(phi)):
        J[k + 1] = E[k].T @ J[k] + Jr[k]
    return J


def bias_jacobians_at(
    window: ImuWindow,
    times: ArrayLike,
    b_g: ArrayLike,
    b_a: ArrayLike,
    rotations: NDArray | None = None,
) -> tuple[NDArray, NDArray]:
    """
    Gyroscope-bias sensitivities needed by the refiner at each time.

    Returns
    -------
    J_t : ndarray, shape (m, 3, 3)
        Orientation sensitivity at ``t`` (same convention as
        :func:`rotation_bias_jacobians`).
    X_t : ndarray, shape (m, 3, 3)
        ``sum_k w_k(t) [R_k a_k]_x R_k J_k`` with ``a_k = alpha_k + b_a``;
        the first-order change of the position accumulation is ``X_t d``.
    """
    b_g = np.asarray(b_g, dtype=float)
    b_a = np.asarray(b_a, dtype=float)
    T = window.imu_period
    R = integrate_rotations(window, b_g) if rotations is None else rotations
    J = rotation_bias_jacobians(window, b_g)
    n, h = split_times(window, times)

    phi_tail = (window.gyro[n] - b_g) * h[:, None]
    E_tail = exp_so3(phi_tail)
    J_t = np.swapaxes(E_tail, -1, -2) @ J[n] + right_jacobian_so3(phi_tail) * h[:, None, None]

    Ra = np.einsum("kij,kj->ki", R, window.accel + b_a)
    X = skew(Ra) @ R @ J
    X_t = weighted_sum(X, n, h, T)
    return J_t, X_t


# --------------------------------------------------------------------------- #
# CSV
# --------------------------------------------------------------------------- #

IMU_HEADER = "t,gx,gy,gz,ax,ay,az"


def save_imu_csv(window: ImuWindow, path: str | Path) -> None:
    data = np.column_stack([window.times, window.gyro, window.accel])
    np.savetxt(path, data, delimiter=",", header=IMU_HEADER, comments="", fmt="%.17g")


def load_imu_csv(path: str | Path, imu_period: float | None = None) -> ImuWindow:
    with open(path) as f:
        header = f.readline().strip().replace(" ", "")
    if header != IMU_HEADER:
        raise ValueError(f"unexpected IMU CSV header {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times = data[:, 0] - data[0, 0]
    if imu_period is None:
        imu_period = float(np.median(np.diff(times)))
    return ImuWindow(times=times, gyro=data[:, 1:4], accel=data[:, 4:7], imu_period=imu_period)
