"""
Geometric primitives, calibration types and SO(3) helpers shared by the solvers.

Conventions
-----------
* Rotations are plain ``(3, 3)`` numpy arrays. ``R_C_I`` maps camera-frame
  vectors into the IMU frame.
* The world frame has gravity ``g_W = [0, 0, gamma]``.
* All solver unknowns live in the reference coordinate system (RCS), i.e. the
  IMU frame at the first IMU sample of a window (``t = 0``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

GRAVITY = 9.810

SMALL_ANGLE = 1e-8


class DegenerateProjection(ValueError):
    """Raised when a point lies (numerically) on the camera plane ``z = 0``."""


class DataAlignmentError(ValueError):
    """Observations and preintegrated IMU quantities do not line up."""


class InsufficientParallax(RuntimeError):
    """Every feature track was rejected as degenerate."""


class IllConditioned(RuntimeError):
    """The reduced linear system is (numerically) singular."""

    def __init__(self, message: str, condition_number: float = np.inf):
        super().__init__(message)
        self.condition_number = condition_number


class OutOfRange(ValueError):
    """A requested time lies outside the IMU window."""


# --------------------------------------------------------------------------- #
# SO(3)
# --------------------------------------------------------------------------- #


def skew(v: ArrayLike) -> NDArray:
    """Skew-symmetric matrix ``[v]_x`` (batched over leading axes)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def exp_so3(phi: ArrayLike) -> NDArray:
    """
    Exponential map (Rodrigues formula) from a rotation vector to a rotation matrix.

    Parameters
    ----------
    phi : array_like, shape (..., 3)
        Rotation vector(s) in radians.

    Returns
    -------
    ndarray, shape (..., 3, 3)
        Rotation about ``phi / |phi|`` by ``|phi|``. Below ``1e-8`` rad the
        second-order Taylor expansion is used.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def log_so3(R: ArrayLike) -> NDArray:
    """Rotation vector of ``R`` (inverse of :func:`exp_so3` for angles below pi)."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = Rotation.from_matrix(flat).as_rotvec()
    return out.reshape(R.shape[:-2] + (3,))


def right_jacobian_so3(phi: ArrayLike) -> NDArray:
    """
    Right Jacobian of SO(3), ``Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)``.

    Batched over leading axes; series expansion below ``1e-8`` rad.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    b = np.where(small, 1.0 / 6.0, (safe - np.sin(safe)) / safe**3)
    return np.eye(3) - a * K + b * K2


def nearest_rotation(M: ArrayLike) -> NDArray:
    """Closest rotation matrix in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def is_rotation(R: ArrayLike, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    return bool(
        np.all(np.abs(R.T @ R - np.eye(3)) < tol) and abs(np.linalg.det(R) - 1.0) < tol
    )


def gravity_rotation(g0: ArrayLike, gamma: float = GRAVITY) -> NDArray:
    """
    Minimal rotation ``R_W`` (world to RCS) with ``R_W @ [0, 0, gamma]`` parallel to ``g0``.

    The rotation axis is orthogonal to the world z-axis, so there is no yaw
    component. When ``g0`` points along ``-z`` the 180 degree rotation about
    the x-axis is returned.
    """
    g0 = np.asarray(g0, dtype=float)
    norm = np.linalg.norm(g0)
    if not norm > 0.0:
        raise ValueError("gravity vector must be nonzero")
    return exp_so3(gravity_angles(g0))


def gravity_angles(g0: ArrayLike) -> NDArray:
    """Rotation vector ``[phi_x, phi_y, 0]`` of :func:`gravity_rotation`."""
    d = np.asarray(g0, dtype=float)
    d = d / np.linalg.norm(d)
    rho = np.hypot(d[0], d[1])
    angle = np.arctan2(rho, d[2])
    if rho < 1e-15:
        if d[2] > 0:
            return np.zeros(3)
        return np.array([np.pi, 0.0, 0.0])
    return angle * np.array([-d[1], d[0], 0.0]) / rho


# --------------------------------------------------------------------------- #
# Projection
# --------------------------------------------------------------------------- #


def project(w: ArrayLike) -> NDArray:
    """
    Perspective projection ``[x/z, y/z]``.

    Raises
    ------
    DegenerateProjection
        If ``|z| < 1e-12`` for any input.
    """
    w = np.asarray(w, dtype=float)
    z = w[..., 2]
    if np.any(np.abs(z) < 1e-12):
        raise DegenerateProjection("point on the z = 0 plane")
    return w[..., :2] / z[..., None]


def projection_jacobian(w: ArrayLike) -> NDArray:
    """Jacobian of :func:`project`, ``(1/z) [I_2 | -pi(w)]``, batched."""
    w = np.asarray(w, dtype=float)
    inv_z = 1.0 / w[..., 2]
    J = np.zeros(w.shape[:-1] + (2, 3))
    J[..., 0, 0] = inv_z
    J[..., 1, 1] = inv_z
    J[..., 0, 2] = -w[..., 0] * inv_z**2
    J[..., 1, 2] = -w[..., 1] * inv_z**2
    return J


# --------------------------------------------------------------------------- #
# Calibration and observations
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> NDArray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_to_ray(self, pixel: ArrayLike) -> NDArray:
        """Unit back-projection ray(s) of pixel(s), shape (..., 3)."""
        px = np.asarray(pixel, dtype=float)
        x = (px[..., 0] - self.cx) / self.fx
        y = (px[..., 1] - self.cy) / self.fy
        ray = np.stack([x, y, np.ones_like(x)], axis=-1)
        return ray / np.linalg.norm(ray, axis=-1, keepdims=True)

    def to_pixel(self, w: ArrayLike) -> NDArray:
        uv = project(w)
        return np.stack(
            [self.fx * uv[..., 0] + self.cx, self.fy * uv[..., 1] + self.cy], axis=-1
        )


@dataclass(frozen=True, eq=False)
class Camera:
    """One camera of the rig: extrinsics in the IMU frame, pinhole intrinsics, readout."""

    R_C_I: NDArray
    p_C_I: NDArray
    intrinsics: Intrinsics
    image_width: int = 640
    image_height: int = 480
    row_readout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "R_C_I", nearest_rotation(self.R_C_I))
        object.__setattr__(self, "p_C_I", np.asarray(self.p_C_I, dtype=float).reshape(3))
        if self.row_readout < 0:
            raise ValueError("row_readout must be >= 0")
        if self.image_height <= 0:
            raise ValueError("image_height must be positive")


@dataclass(frozen=True, eq=False)
class RigCalibration:
    cameras: tuple[Camera, ...]
    imu_period: float

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ValueError("calibration needs at least one camera")
        if not self.imu_period > 0:
            raise ValueError("imu_period must be positive")

    @property
    def R_C_I(self) -> NDArray:
        """Stacked camera-to-IMU rotations, shape (ncam, 3, 3)."""
        return np.stack([c.R_C_I for c in self.cameras])

    @property
    def p_C_I(self) -> NDArray:
        return np.stack([c.p_C_I for c in self.cameras])

    def to_dict(self) -> dict:
        return {
            "imu_period": self.imu_period,
            "cameras": [
                {
                    "R_C_I": c.R_C_I.reshape(-1).tolist(),
                    "p_C_I": c.p_C_I.tolist(),
                    "intrinsics": {
                        "fx": c.intrinsics.fx,
                        "fy": c.intrinsics.fy,
                        "cx": c.intrinsics.cx,
                        "cy": c.intrinsics.cy,
                    },
                    "image_width": c.image_width,
                    "image_height": c.image_height,
                    "row_readout": c.row_readout,
                }
                for c in self.cameras
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigCalibration":
        cams = []
        for c in d["cameras"]:
            intr = c["intrinsics"]
            cams.append(
                Camera(
                    R_C_I=np.asarray(c["R_C_I"], dtype=float).reshape(3, 3),
                    p_C_I=np.asarray(c["p_C_I"], dtype=float),
                    intrinsics=Intrinsics(intr["fx"], intr["fy"], intr["cx"], intr["cy"]),
                    image_width=int(c.get("image_width", 2 * intr["cx"] + 1)),
                    image_height=int(c["image_height"]),
                    row_readout=float(c.get("row_readout", 0.0)),
                )
            )
        return cls(cameras=tuple(cams), imu_period=float(d["imu_period"]))


def load_calibration(path: str | Path) -> RigCalibration:
    with open(path) as f:
        return RigCalibration.from_dict(json.load(f))


def save_calibration(calib: RigCalibration, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(calib.to_dict(), f, indent=2)


@dataclass(frozen=True, eq=False)
class Observation:
    """A single image measurement of a map point."""

    camera_index: int
    pixel: NDArray
    ray: NDArray
    time: float

    def __post_init__(self):
        ray = np.asarray(self.ray, dtype=float).reshape(3)
        n = np.linalg.norm(ray)
        if abs(n - 1.0) > 1e-12:
            ray = ray / n
        object.__setattr__(self, "ray", ray)
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))
        if self.time < 0:
            raise ValueError("observation time must be >= 0")


@dataclass(frozen=True, eq=False)
class FeatureTrack:
    point_id: int
    observations: tuple[Observation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        obs = tuple(sorted(self.observations, key=lambda o: (o.time, o.camera_index)))
        if not obs:
            raise ValueError(f"track {self.point_id} has no observations")
        object.__setattr__(self, "observations", obs)
        for a, b in zip(obs[:-1], obs[1:]):
            if a.time == b.time and a.camera_index == b.camera_index:
                raise ValueError(f"track {self.point_id}: duplicate observation at t={a.time}")

    def __len__(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class ObservationArrays:
    """Observations of a list of tracks flattened into contiguous arrays (track-major)."""

    point_ids: NDArray  # (M,)
    offsets: NDArray  # (M + 1,)
    track_index: NDArray  # (n,)
    camera: NDArray  # (n,)
    ray: NDArray  # (n, 3)
    pixel: NDArray  # (n, 2)
    time: NDArray  # (n,)

    @property
    def counts(self) -> NDArray:
        return np.diff(self.offsets)


def flatten_tracks(tracks: Sequence[FeatureTrack]) -> ObservationArrays:
    counts = np.array([len(t.observations) for t in tracks], dtype=int)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    obs = [o for t in tracks for o in t.observations]
    n = len(obs)
    return ObservationArrays(
        point_ids=np.array([t.point_id for t in tracks], dtype=int),
        offsets=offsets,
        track_index=np.repeat(np.arange(len(tracks)), counts),
        camera=np.array([o.camera_index for o in obs], dtype=int).reshape(n),
        ray=np.array([o.ray for o in obs], dtype=float).reshape(n, 3),
        pixel=np.array([o.pixel for o in obs], dtype=float).reshape(n, 2),
        time=np.array([o.time for o in obs], dtype=float).reshape(n),
    )
