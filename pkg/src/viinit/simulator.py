"""
Synthetic visual-inertial data with exact ground truth.

A procedural trajectory (position, velocity and orientation in closed form)
is sampled into IMU readings. The readings are the interval-averaged angular
rate and specific force, so that the discrete kinematic model used by the
solvers reproduces the trajectory at every IMU sample. Ground-truth poses at
arbitrary times come from propagating that same discrete model, which makes
noise-free data satisfy the linear measurement model to machine precision.

World frame: x forward, y right, z down, gravity ``[0, 0, gamma]``.
IMU frame: x right, y down, z forward (camera-like).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .core import (
    GRAVITY,
    Camera,
    FeatureTrack,
    Intrinsics,
    Observation,
    RigCalibration,
    exp_so3,
    log_so3,
)
from .preintegration import ImuWindow

# IMU axes (right, down, forward) expressed in the world frame (forward, right, down).
R_BASE = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

TRAJECTORY_KINDS = ("static", "walk_forward", "head_moving", "running", "rotating", "free_fall")


class EmptySelection(RuntimeError):
    """No frame window passed the selection criteria."""


# --------------------------------------------------------------------------- #
# Trajectories
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TrajectorySpec:
    """
    Procedural trajectory parameters.

    ``turn_rate`` is the peak yaw rate of the head sweep (rad/s). The motion
    starts after ``static_time`` seconds at rest and blends in over
    ``ramp_time`` seconds with a quintic smoothstep, so position is C2.
    """

    kind: str = "walk_forward"
    duration: float = 13.0
    speed: float = 1.0
    turn_rate: float = 0.6
    bob_amplitude: float = 0.03
    bob_frequency: float = 1.8
    static_time: float = 1.0
    ramp_time: float = 1.0
    gamma: float = GRAVITY

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")


def _ramp(t, t0, dur):
    """Quintic smoothstep from 0 to 1 on [t0, t0 + dur]: value, d1, d2 and integral."""
    u = np.clip((t - t0) / dur, 0.0, 1.0)
    r = u**3 * (10 - 15 * u + 6 * u**2)
    r1 = 30 * u**2 * (1 - u) ** 2 / dur
    r2 = 60 * u * (1 - u) * (1 - 2 * u) / dur**2
    integral = dur * (u**4 * (2.5 - 3 * u + u**2)) + np.maximum(t - t0 - dur, 0.0)
    return r, r1, r2, integral


def _sin(t, amp, freq, phase=0.0):
    w = 2 * np.pi * freq
    s, c = np.sin(w * t + phase), np.cos(w * t + phase)
    return amp * s, amp * w * c, -amp * w**2 * s


def _times(f, g):
    return f[0] * g[0], f[1] * g[0] + f[0] * g[1], f[2] * g[0] + 2 * f[1] * g[1] + f[0] * g[2]


class Trajectory:
    """Closed-form world-frame kinematics of the IMU for a :class:`TrajectorySpec`."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec

    def kinematics(self, t: ArrayLike) -> tuple[NDArray, NDArray, NDArray]:
        """World position, velocity and acceleration of the IMU, each (m, 3)."""
        s = self.spec
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p, v, a = [np.zeros((len(t), 3)) for _ in range(3)]
        r, r1, r2, rint = _ramp(t, s.static_time, s.ramp_time)
        ramp = (r, r1, r2)

        if s.kind in ("walk_forward", "running"):
            p[:, 0], v[:, 0], a[:, 0] = s.speed * rint, s.speed * r, s.speed * r1
            sway = _times(ramp, _sin(t, 0.7 * s.bob_amplitude, 0.5 * s.bob_frequency))
            bob = _times(ramp, _sin(t, s.bob_amplitude, s.bob_frequency, 0.4))
            for axis, comp in ((1, sway), (2, bob)):
                p[:, axis], v[:, axis], a[:, axis] = comp
        elif s.kind == "head_moving":
            comps = [
                _sin(t, 0.10, 0.45),
                _sin(t, 0.06, 0.65, 0.5),
                _sin(t, 0.04, 0.9, 1.0),
            ]
            for axis, comp in enumerate(comps):
                p[:, axis], v[:, axis], a[:, axis] = _times(ramp, comp)
            p[:, 0] += 0.2 * s.speed * rint
            v[:, 0] += 0.2 * s.speed * r
            a[:, 0] += 0.2 * s.speed * r1
        elif s.kind == "free_fall":
            g = np.array([0.0, 0.0, s.gamma])
            v0 = np.array([s.speed, 0.0, 0.0])
            p = 0.5 * t[:, None] ** 2 * g + t[:, None] * v0
            v = t[:, None] * g + v0
            a = np.broadcast_to(g, (len(t), 3)).copy()
        return p, v, a

    def euler(self, t: ArrayLike) -> NDArray:
        """Yaw, pitch, roll (world ZYX) of the head motion, shape (m, 3)."""
        s = self.spec
        t = np.atleast_1d(np.asarray(t, dtype=float))
        r = _ramp(t, s.static_time, s.ramp_time)[0]
        ang = np.zeros((len(t), 3))
        if s.kind in ("static", "free_fall"):
            return ang
        f_yaw = 0.25 if s.kind != "head_moving" else 0.4
        w = 2 * np.pi * f_yaw
        ang[:, 0] = r * (s.turn_rate / w) * np.sin(w * t)
        if s.kind in ("walk_forward", "running"):
            ang[:, 1] = r * 0.12 * np.sin(2 * np.pi * 0.23 * t + 0.3)
            ang[:, 2] = r * 0.04 * np.sin(2 * np.pi * 0.31 * t + 1.1)
            if s.kind == "running":
                ang[:, 1] += r * 0.03 * np.sin(2 * np.pi * s.bob_frequency * t)
        elif s.kind == "head_moving":
            ang[:, 1] = r * (0.5 * s.turn_rate / (2 * np.pi * 0.55)) * np.sin(2 * np.pi * 0.55 * t + 0.7)
            ang[:, 2] = r * (0.25 * s.turn_rate / (2 * np.pi * 0.7)) * np.sin(2 * np.pi * 0.7 * t + 2.0)
        elif s.kind == "rotating":
            ang[:, 1] = r * (0.7 * s.turn_rate / (2 * np.pi * 0.35)) * np.sin(2 * np.pi * 0.35 * t + 0.5)
            ang[:, 2] = r * (0.3 * s.turn_rate / (2 * np.pi * 0.5)) * np.sin(2 * np.pi * 0.5 * t + 1.3)
        return ang

    def rotation(self, t: ArrayLike) -> NDArray:
        """World-from-IMU rotation, shape (m, 3, 3)."""
        return Rotation.from_euler("ZYX", self.euler(t)).as_matrix() @ R_BASE

    def position(self, t):
        return self.kinematics(t)[0]

    def velocity(self, t):
        return self.kinematics(t)[1]

    def acceleration(self, t):
        return self.kinematics(t)[2]


# --------------------------------------------------------------------------- #
# Noise and ground truth
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class NoiseSpec:
    """
    Sensor noise.

    ``accel_bias`` and ``gyro_bias`` are added to the readings (sensor biases).
    Densities are continuous-time; the per-sample standard deviation is
    ``density * sqrt(rate)``. ``bias_walk`` is the per-window step of a random
    walk applied to both biases across consecutive windows.
    """

    pixel_sigma: float = 0.0
    gyro_noise_density: float = 0.0
    accel_noise_density: float = 0.0
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bias_walk: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.pixel_sigma, self.gyro_noise_density, self.accel_noise_density, self.bias_walk) < 0:
            raise ValueError("noise levels must be nonnegative")


@dataclass(eq=False)
class GroundTruth:
    """
    Discrete-model ground truth of one window in its RCS.

    Sample-level arrays have one row per IMU sample of the window.
    """

    times: NDArray
    R: NDArray  # (K, 3, 3) IMU orientation in the RCS
    p: NDArray  # (K, 3)
    v: NDArray  # (K, 3)
    gyro: NDArray  # noise-free readings
    accel: NDArray
    g0: NDArray
    R_W: NDArray  # world-to-RCS, including the (unobservable) yaw
    imu_period: float
    gyro_bias: NDArray = field(default_factory=lambda: np.zeros(3))
    accel_bias: NDArray = field(default_factory=lambda: np.zeros(3))
    points: dict[int, NDArray] = field(default_factory=dict)
    depths: dict[tuple[int, int], float] = field(default_factory=dict)
    ref_R_C: NDArray = field(default_factory=lambda: np.eye(3))
    ref_p_C: NDArray = field(default_factory=lambda: np.zeros(3))

    @property
    def v0(self) -> NDArray:
        return self.v[0]

    @property
    def b_a(self) -> NDArray:
        """Accelerometer correction in the solver convention (negated sensor bias)."""
        return -np.asarray(self.accel_bias, dtype=float)

    def pose(self, t: ArrayLike) -> tuple[NDArray, NDArray]:
        """IMU orientation and position at arbitrary times by partial-step propagation."""
        T = self.imu_period
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = np.clip(np.floor(t / T + 1e-9).astype(int), 0, len(self.times) - 1)
        h = np.clip(t - n * T, 0.0, None)[:, None]
        R_n = self.R[n]
        R_t = R_n @ exp_so3(self.gyro[n] * h)
        acc = self.g0 + np.einsum("nij,nj->ni", R_n, self.accel[n])
        p_t = self.p[n] + h * self.v[n] + 0.5 * h**2 * acc
        return R_t, p_t

    def camera_pose(self, t: ArrayLike, cam: Camera) -> tuple[NDArray, NDArray]:
        R_I, p_I = self.pose(t)
        return R_I @ cam.R_C_I, p_I + R_I @ cam.p_C_I


def default_rig(
    imu_rate: float = 800.0,
    frame_readout: float = 0.0,
    baseline: float = 0.06,
    width: int = 640,
    height: int = 480,
    focal: float = 460.0,
) -> RigCalibration:
    """VGA stereo rig with the baseline along the IMU x-axis."""
    intr = Intrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)
    tilt = exp_so3([0.01, -0.02, 0.005])
    cams = []
    for sign in (-1.0, 1.0):
        cams.append(
            Camera(
                R_C_I=tilt,
                p_C_I=np.array([sign * baseline / 2.0, 0.01, 0.02]),
                intrinsics=intr,
                image_width=width,
                image_height=height,
                row_readout=frame_readout / height,
            )
        )
    return RigCalibration(cameras=tuple(cams), imu_period=1.0 / imu_rate)


def sample_imu(
    traj: Trajectory,
    rate: float,
    noise: NoiseSpec = NoiseSpec(),
    t_start: float = 0.0,
    duration: float | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[ImuWindow, GroundTruth]:
    """
    Sample IMU readings from ``t_start`` and anchor the RCS at that sample.

    Readings are interval averages: ``gyro_k = log(R_k^T R_{k+1}) / T`` and
    ``accel_k = R_k^T ((v_{k+1} - v_k) / T - g_W)``; biases and white noise
    are added on top.
    """
    T = 1.0 / rate
    if duration is None:
        duration = traj.spec.duration - t_start
    K = int(np.floor(duration * rate + 1e-9)) + 1
    if K < 2:
        raise ValueError("window shorter than two IMU samples")
    t = t_start + T * np.arange(K + 1)
    R_w = traj.rotation(t)
    _, v_w, _ = traj.kinematics(t)
    g_w = np.array([0.0, 0.0, traj.spec.gamma])

    gyro = log_so3(np.swapaxes(R_w[:-1], -1, -2) @ R_w[1:]) / T
    mean_acc = (v_w[1:] - v_w[:-1]) / T
    accel = np.einsum("kji,kj->ki", R_w[:-1], mean_acc - g_w)

    R0 = R_w[0]
    g0 = R0.T @ g_w
    v0 = R0.T @ v_w[0]

    # discrete propagation in the RCS
    R = np.empty((K, 3, 3))
    p = np.empty((K, 3))
    v = np.empty((K, 3))
    R[0], p[0], v[0] = np.eye(3), np.zeros(3), v0
    steps = exp_so3(gyro * T)
    for k in range(K - 1):
        acc = g0 + R[k] @ accel[k]
        p[k + 1] = p[k] + T * v[k] + 0.5 * T**2 * acc
        v[k + 1] = v[k] + T * acc
        R[k + 1] = R[k] @ steps[k]

    truth = GroundTruth(
        times=T * np.arange(K),
        R=R,
        p=p,
        v=v,
        gyro=gyro,
        accel=accel,
        g0=g0,
        R_W=R0.T,
        imu_period=T,
    )
    window = ImuWindow(times=truth.times.copy(), gyro=gyro.copy(), accel=accel.copy(), imu_period=T)
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    window = corrupt_imu(window, noise, rng, truth)
    return window, truth


def corrupt_imu(
    window: ImuWindow,
    noise: NoiseSpec,
    rng: np.random.Generator,
    truth: GroundTruth | None = None,
    gyro_bias: ArrayLike | None = None,
    accel_bias: ArrayLike | None = None,
) -> ImuWindow:
    """Add constant biases and white noise to IMU readings (recorded on ``truth``)."""
    b_g = np.asarray(noise.gyro_bias if gyro_bias is None else gyro_bias, dtype=float)
    b_a = np.asarray(noise.accel_bias if accel_bias is None else accel_bias, dtype=float)
    rate = 1.0 / window.imu_period
    K = len(window)
    gyro = window.gyro + b_g
    accel = window.accel + b_a
    if noise.gyro_noise_density > 0:
        gyro = gyro + noise.gyro_noise_density * np.sqrt(rate) * rng.standard_normal((K, 3))
    if noise.accel_noise_density > 0:
        accel = accel + noise.accel_noise_density * np.sqrt(rate) * rng.standard_normal((K, 3))
    if truth is not None:
        truth.gyro_bias = b_g.copy()
        truth.accel_bias = b_a.copy()
    return ImuWindow(times=window.times, gyro=gyro, accel=accel, imu_period=window.imu_period)


# --------------------------------------------------------------------------- #
# Scene and observations
# --------------------------------------------------------------------------- #


def generate_points(
    R_C: NDArray,
    p_C: NDArray,
    count: int,
    depth_range: tuple[float, float],
    camera: Camera,
    rng: np.random.Generator,
) -> tuple[NDArray, NDArray]:
    """
    Back-project an even pixel grid of the reference camera at random depths.

    Returns
    -------
    points : ndarray, shape (count, 3)
        Points in the RCS.
    pixels : ndarray, shape (count, 2)
        Their source pixels.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    W, H = camera.image_width, camera.image_height
    gx = int(np.ceil(np.sqrt(count)))
    gy = int(np.ceil(count / gx))
    jj, ii = np.meshgrid(np.arange(gy), np.arange(gx), indexing="ij")
    u = -0.5 + (ii.ravel() + 0.5) * W / gx
    v = -0.5 + (jj.ravel() + 0.5) * H / gy
    pixels = np.column_stack([u, v])[:count]
    depth = rng.uniform(depth_range[0], depth_range[1], size=count)
    intr = camera.intrinsics
    xyz = np.column_stack(
        [(pixels[:, 0] - intr.cx) / intr.fx, (pixels[:, 1] - intr.cy) / intr.fy, np.ones(count)]
    )
    points = p_C + (depth[:, None] * xyz) @ R_C.T
    return points, pixels


def observe(
    points: NDArray,
    truth: GroundTruth,
    calib: RigCalibration,
    frame_times: Sequence[float],
    pixel_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    point_ids: Sequence[int] | None = None,
    max_iterations: int = 5,
    tol: float = 1e-9,
    min_depth: float = 0.1,
) -> list[FeatureTrack]:
    """
    Project points into every frame and camera.

    With a rolling shutter the observation time ``tau + row * row_readout``
    depends on the projected row, which depends on the pose at that time; the
    fixed point is found by iteration. Observations whose time does not
    converge within ``max_iterations`` are discarded. Pixel noise is added
    after the time has been assigned, and true depths are stored in
    ``truth.depths``.
    """
    points = np.asarray(points, dtype=float)
    M = len(points)
    ids = np.arange(M) if point_ids is None else np.asarray(point_ids)
    per_point: list[list[Observation]] = [[] for _ in range(M)]
    lam_true: list[list[float]] = [[] for _ in range(M)]
    if rng is None:
        rng = np.random.default_rng(0)
    last_time = truth.times[-1]

    for tau in frame_times:
        for ci, cam in enumerate(calib.cameras):
            dt_row = cam.row_readout
            t = np.full(M, tau + (0.5 * (cam.image_height - 1) * dt_row))
            ok = np.ones(M, dtype=bool)
            converged = np.zeros(M, dtype=bool)
            for _ in range(max_iterations + 1):
                R_C, p_C = truth.camera_pose(np.clip(t, 0.0, last_time), cam)
                w = np.einsum("nji,nj->ni", R_C, points - p_C)
                ok = w[:, 2] > min_depth
                pix = np.full((M, 2), np.nan)
                pix[ok] = cam.intrinsics.to_pixel(w[ok])
                t_new = tau + pix[:, 1] * dt_row
                converged = ok & (np.abs(t_new - t) < tol)
                if dt_row == 0.0:
                    converged = ok
                    break
                if np.all(converged | ~ok):
                    break
                # keep converged times so that pixel and time stay consistent
                t = np.where(ok & ~converged, t_new, t)
            inside = (
                converged
                & (pix[:, 0] >= 0)
                & (pix[:, 0] <= cam.image_width - 1)
                & (pix[:, 1] >= 0)
                & (pix[:, 1] <= cam.image_height - 1)
                & (t <= last_time)
            )
            for j in np.flatnonzero(inside):
                px = pix[j]
                if pixel_sigma > 0:
                    px = px + pixel_sigma * rng.standard_normal(2)
                ray = cam.intrinsics.pixel_to_ray(px)
                per_point[j].append(Observation(ci, px, ray, float(t[j])))
                lam_true[j].append(float(np.linalg.norm(w[j])))

    tracks = []
    for j in range(M):
        if len(per_point[j]) < 2:
            continue
        order = sorted(range(len(per_point[j])), key=lambda i: (per_point[j][i].time, per_point[j][i].camera_index))
        track = FeatureTrack(int(ids[j]), tuple(per_point[j][i] for i in order))
        tracks.append(track)
        for k, i in enumerate(order):
            truth.depths[(int(ids[j]), k)] = lam_true[j][i]
    return tracks


def add_pixel_noise(
    tracks: Sequence[FeatureTrack],
    calib: RigCalibration,
    sigma: float,
    rng: np.random.Generator,
    outlier_fraction: float = 0.0,
) -> list[FeatureTrack]:
    """
    Perturb pixels with Gaussian noise (times unchanged) and recompute rays.

    ``outlier_fraction`` of the observations are instead moved to a uniformly
    random pixel.
    """
    out = []
    for tr in tracks:
        n = len(tr.observations)
        px = np.array([o.pixel for o in tr.observations])
        px = px + sigma * rng.standard_normal((n, 2))
        if outlier_fraction > 0:
            bad = rng.random(n) < outlier_fraction
            for i in np.flatnonzero(bad):
                cam = calib.cameras[tr.observations[i].camera_index]
                px[i] = rng.uniform([0, 0], [cam.image_width - 1, cam.image_height - 1])
        obs = tuple(
            Observation(o.camera_index, p, calib.cameras[o.camera_index].intrinsics.pixel_to_ray(p), o.time)
            for o, p in zip(tr.observations, px)
        )
        out.append(FeatureTrack(tr.point_id, obs))
    return out


def frame_start_times(tracks: Sequence[FeatureTrack], calib: RigCalibration) -> list[FeatureTrack]:
    """Copy of ``tracks`` with rolling-shutter row offsets removed (global-shutter timestamps)."""
    out = []
    for tr in tracks:
        obs = []
        for o in tr.observations:
            cam = calib.cameras[o.camera_index]
            row = np.clip(o.pixel[1], 0.0, cam.image_height - 1)
            obs.append(replace(o, time=max(o.time - row * cam.row_readout, 0.0)))
        out.append(FeatureTrack(tr.point_id, tuple(obs)))
    return out


# --------------------------------------------------------------------------- #
# Windows
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class FrameWindow:
    """Frame start times of one evaluation window (sequence time)."""

    frame_times: tuple[float, ...]
    index: int = 0


def window_select(
    frame_times: Sequence[float],
    n_frames: int,
    downsample: int,
    min_speed: float,
    traj: Trajectory,
    stride: int = 1,
    max_windows: int | None = None,
) -> list[FrameWindow]:
    """
    Sliding windows of ``n_frames`` frames spaced ``downsample`` frames apart.

    Windows whose true speed at their first frame is below ``min_speed`` are
    dropped.

    Raises
    ------
    EmptySelection
        If no window survives.
    """
    frame_times = np.asarray(frame_times, dtype=float)
    span = (n_frames - 1) * downsample
    out = []
    for start in range(0, len(frame_times) - span, max(stride, 1)):
        ft = frame_times[start : start + span + 1 : downsample]
        speed = np.linalg.norm(traj.velocity(ft[0])[0])
        if speed < min_speed:
            continue
        out.append(FrameWindow(tuple(float(x) for x in ft), len(out)))
        if max_windows is not None and len(out) >= max_windows:
            break
    if not out:
        raise EmptySelection("no frame window passed the selection")
    return out


@dataclass(eq=False)
class SimWindow:
    """One solver window: calibration, IMU data, tracks and ground truth."""

    calib: RigCalibration
    imu: ImuWindow
    tracks: list[FeatureTrack]
    truth: GroundTruth
    frame_times: NDArray  # relative to the first IMU sample
    clean_imu: ImuWindow | None = None
    clean_tracks: list[FeatureTrack] | None = None

    @property
    def integration_time(self) -> float:
        times = [o.time for t in self.tracks for o in t.observations]
        return float(max(times) - min(times)) if times else 0.0

    def realize(self, noise: NoiseSpec, rng: np.random.Generator) -> "SimWindow":
        """New realization of pixel and IMU noise on top of the clean data."""
        tracks = add_pixel_noise(
            self.clean_tracks, self.calib, noise.pixel_sigma, rng, noise.outlier_fraction
        )
        imu = corrupt_imu(
            self.clean_imu, noise, rng, None, self.truth.gyro_bias, self.truth.accel_bias
        )
        return SimWindow(self.calib, imu, tracks, self.truth, self.frame_times, self.clean_imu, self.clean_tracks)


def make_window(
    traj: Trajectory,
    calib: RigCalibration,
    frames: FrameWindow,
    n_points: int = 100,
    depth_range: tuple[float, float] = (1.0, 15.0),
    noise: NoiseSpec = NoiseSpec(),
    rng: np.random.Generator | None = None,
    gyro_bias: ArrayLike | None = None,
    accel_bias: ArrayLike | None = None,
) -> SimWindow:
    """
    Build a window anchored at the IMU sample at or before its first frame.

    The returned window carries one noise realization; the clean data are
    kept for :meth:`SimWindow.realize`.
    """
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    T = calib.imu_period
    start = np.floor(frames.frame_times[0] / T + 1e-9) * T
    readout = max(c.row_readout * c.image_height for c in calib.cameras)
    duration = frames.frame_times[-1] - start + readout + 3 * T
    clean_imu, truth = sample_imu(traj, 1.0 / T, NoiseSpec(), t_start=start, duration=duration)
    rel = np.maximum(np.asarray(frames.frame_times) - start, 0.0)

    ref_cam = calib.cameras[0]
    R_C, p_C = truth.camera_pose(rel[0], ref_cam)
    truth.ref_R_C, truth.ref_p_C = R_C[0], p_C[0]
    points, _ = generate_points(R_C[0], p_C[0], n_points, depth_range, ref_cam, rng)
    truth.points = {i: points[i] for i in range(n_points)}
    clean_tracks = observe(points, truth, calib, rel)

    b_g = noise.gyro_bias if gyro_bias is None else gyro_bias
    b_a = noise.accel_bias if accel_bias is None else accel_bias
    truth.gyro_bias = np.asarray(b_g, dtype=float)
    truth.accel_bias = np.asarray(b_a, dtype=float)
    window = SimWindow(calib, clean_imu, clean_tracks, truth, rel, clean_imu, clean_tracks)
    return window.realize(noise, rng)


@dataclass(frozen=True)
class SimulationSpec:
    """Everything needed to regenerate a set of windows from a seed."""

    trajectory: TrajectorySpec = TrajectorySpec()
    noise: NoiseSpec = NoiseSpec()
    imu_rate: float = 800.0
    frame_rate: float = 30.0
    frame_readout: float = 0.0
    baseline: float = 0.06
    n_frames: int = 5
    downsample: int = 3
    n_points: int = 100
    depth_range: tuple[float, float] = (1.0, 15.0)
    min_speed: float = 0.01
    stride: int = 15
    max_windows: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        d = dict(d)
        traj = TrajectorySpec(**d.pop("trajectory", {}))
        nd = dict(d.pop("noise", {}))
        for key in ("gyro_bias", "accel_bias"):
            if key in nd:
                nd[key] = tuple(nd[key])
        noise = NoiseSpec(**nd)
        if "depth_range" in d:
            d["depth_range"] = tuple(d["depth_range"])
        return cls(trajectory=traj, noise=noise, **d)

    def rig(self) -> RigCalibration:
        return default_rig(self.imu_rate, self.frame_readout, self.baseline)

    def frame_times(self) -> NDArray:
        n = int(np.floor(self.trajectory.duration * self.frame_rate))
        return np.arange(n) / self.frame_rate


def simulate(spec: SimulationSpec, seed: int | None = None) -> list[SimWindow]:
    """
    Generate every selected window of a simulated sequence.

    Each window gets its own seed derived from ``seed`` (default
    ``spec.noise.seed``), so windows are reproducible individually.
    """
    seed = spec.noise.seed if seed is None else seed
    traj = Trajectory(spec.trajectory)
    calib = spec.rig()
    frames = window_select(
        spec.frame_times(),
        spec.n_frames,
        spec.downsample,
        spec.min_speed,
        traj,
        spec.stride,
        spec.max_windows,
    )
    walk_rng = np.random.default_rng([seed, 7])
    b_g = np.asarray(spec.noise.gyro_bias, dtype=float)
    b_a = np.asarray(spec.noise.accel_bias, dtype=float)
    out = []
    for fw in frames:
        rng = np.random.default_rng([seed, fw.index])
        out.append(
            make_window(
                traj, calib, fw, spec.n_points, spec.depth_range, spec.noise, rng, b_g, b_a
            )
        )
        if spec.noise.bias_walk > 0:
            b_g = b_g + spec.noise.bias_walk * walk_rng.standard_normal(3)
            b_a = b_a + spec.noise.bias_walk * walk_rng.standard_normal(3)
    return out
