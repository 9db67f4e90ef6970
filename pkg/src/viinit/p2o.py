"""
Point-to-observation closed-form initializer.

Every observation ``i`` of map point ``m_j`` gives three linear equations::

    t_i v0 + t_i^2/2 g0 + B_i b_a - m_j + lambda_ji q_ji = c_ji

with ``q_ji = R_Ci u_ji``. Depths are removed by the per-observation projector
``P = I - q q^T``; points are removed through their 3x3 normal blocks
``S_j = N_j I - sum q q^T``. What remains is a 6x6 (or 9x9) system in
``z = [v0, g0, (b_a)]`` accumulated track by track without building the
full sparse matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import (
    DataAlignmentError,
    FeatureTrack,
    IllConditioned,
    InsufficientParallax,
    ObservationArrays,
    RigCalibration,
    flatten_tracks,
)
from .preintegration import ImuWindow, Preintegrals, preintegrate_many
from .state import InitState, SolverOptions

DEGENERACY_RATIO = 1e-8


@dataclass(frozen=True, eq=False)
class Rows:
    """Per-observation coefficients of the linear model, flattened track-major."""

    obs: ObservationArrays
    t: NDArray  # (n,)
    B: NDArray  # (n, 3, 3)
    q: NDArray  # (n, 3) rotated unit rays in the RCS
    c: NDArray  # (n, 3)

    def V(self, dim: int) -> NDArray:
        """Coefficient blocks ``[t I, t^2/2 I, (B)]``, shape (n, 3, dim)."""
        n = len(self.t)
        V = np.zeros((n, 3, dim))
        idx = np.arange(3)
        V[:, idx, idx] = self.t[:, None]
        V[:, idx, idx + 3] = 0.5 * self.t[:, None] ** 2
        if dim == 9:
            V[:, :, 6:] = self.B
        return V


@dataclass(frozen=True, eq=False)
class ProjectedRows:
    rows: Rows
    P: NDArray  # (n, 3, 3)
    PV: NDArray  # (n, 3, dim)
    Pc: NDArray  # (n, 3)


@dataclass(frozen=True, eq=False)
class EliminatedSystem:
    """
    Reduced normal equations ``A z = b`` plus the per-track caches needed to
    recover points.

    Only kept (non-degenerate) tracks appear in the per-track arrays.
    """

    A: NDArray
    b: NDArray
    point_ids: NDArray  # (M,)
    S: NDArray  # (M, 3, 3)
    H: NDArray  # (M, 3, 3)
    SPV: NDArray  # (M, 3, dim)
    SPc: NDArray  # (M, 3)
    kept_tracks: NDArray  # bool over input tracks
    kept_obs: NDArray  # bool over flattened observations
    dropped: int
    condition_number: float

    @property
    def dim(self) -> int:
        return len(self.b)


def preintegrate_tracks(
    tracks: Sequence[FeatureTrack], window: ImuWindow, b_g: ArrayLike | None = None
) -> Preintegrals:
    """Preintegrals aligned with the flattened observations of ``tracks``."""
    times = np.array([o.time for t in tracks for o in t.observations], dtype=float)
    return preintegrate_many(window, times, b_g)


def build_rows(
    tracks: Sequence[FeatureTrack] | ObservationArrays,
    preints: Preintegrals,
    calib: RigCalibration,
) -> Rows:
    """
    Rotated rays ``q = R_I R_C^I u`` and constants ``c`` for every observation.

    Raises
    ------
    DataAlignmentError
        If ``preints`` does not match the observations one to one.
    """
    obs = tracks if isinstance(tracks, ObservationArrays) else flatten_tracks(tracks)
    n = len(obs.time)
    if len(preints) != n:
        raise DataAlignmentError(f"{n} observations but {len(preints)} preintegrals")
    if n and np.max(np.abs(preints.t - obs.time)) > 1e-9:
        raise DataAlignmentError("preintegral times do not match observation times")
    if n and (obs.camera.min() < 0 or obs.camera.max() >= len(calib.cameras)):
        raise DataAlignmentError("observation refers to an unknown camera")
    R_C = preints.R_I @ calib.R_C_I[obs.camera]
    q = np.einsum("nij,nj->ni", R_C, obs.ray)
    c = -np.einsum("nij,nj->ni", preints.R_I, calib.p_C_I[obs.camera]) - preints.accum
    return Rows(obs=obs, t=preints.t, B=preints.B, q=q, c=c)


def eliminate_depths(rows: Rows, dim: int = 6) -> ProjectedRows:
    """Apply ``P = I - q q^T`` to every 3-row block."""
    q = rows.q
    # P^2 - P = (|q|^2 - 1) q q^T, so unit rays make P idempotent.
    if np.any(np.abs(np.einsum("ni,ni->n", q, q) - 1.0) > 1e-9):
        raise ValueError("rotated rays are not unit vectors")
    P = np.eye(3) - q[:, :, None] * q[:, None, :]
    PV = np.empty((len(q), 3, dim))
    PV[:, :, 0:3] = P * rows.t[:, None, None]
    PV[:, :, 3:6] = P * (0.5 * rows.t**2)[:, None, None]
    if dim == 9:
        PV[:, :, 6:9] = P @ rows.B
    Pc = np.einsum("nij,nj->ni", P, rows.c)
    return ProjectedRows(rows=rows, P=P, PV=PV, Pc=Pc)


def inv3(S: NDArray) -> NDArray:
    """Closed-form inverse of a batch of 3x3 matrices (adjugate over determinant)."""
    r0, r1, r2 = S[..., 0, :], S[..., 1, :], S[..., 2, :]
    c0 = np.cross(r1, r2)
    det = np.einsum("...i,...i->...", r0, c0)
    adj = np.stack([c0, np.cross(r2, r0), np.cross(r0, r1)], axis=-1)
    return adj / det[..., None, None]


def eliminate_points(
    projected: ProjectedRows, options: SolverOptions = SolverOptions()
) -> EliminatedSystem:
    """
    Eliminate map points and accumulate the reduced normal equations.

    Tracks whose block ``S_j`` has smallest eigenvalue ``<= 1e-8 N_j`` (no
    parallax) or fewer than ``options.min_observations_per_track``
    observations are dropped.

    Raises
    ------
    InsufficientParallax
        If no track survives.
    """
    obs = projected.rows.obs
    counts = obs.counts
    starts = obs.offsets[:-1]
    S_all = np.add.reduceat(projected.P, starts, axis=0) if len(starts) else np.zeros((0, 3, 3))
    lam_min = np.linalg.eigvalsh(S_all)[:, 0] if len(starts) else np.zeros(0)
    kept = (counts >= options.min_observations_per_track) & (
        lam_min > DEGENERACY_RATIO * counts
    )
    if not np.any(kept):
        raise InsufficientParallax("every feature track is degenerate")
    kept_obs = kept[obs.track_index]

    PV, Pc = projected.PV, projected.Pc
    if not np.all(kept_obs):
        PV, Pc = PV[kept_obs], Pc[kept_obs]
        sub_counts = counts[kept]
        sub_starts = np.concatenate([[0], np.cumsum(sub_counts)[:-1]])
    else:
        sub_starts = starts
    S = S_all[kept]
    H = inv3(S)
    SPV = np.add.reduceat(PV, sub_starts, axis=0)
    SPc = np.add.reduceat(Pc, sub_starts, axis=0)

    HSPV = H @ SPV
    A = np.einsum("nki,nkj->ij", PV, PV) - np.einsum("mki,mkj->ij", SPV, HSPV)
    b = np.einsum("nki,nk->i", PV, Pc) - np.einsum("mki,mk->i", HSPV, SPc)
    A = 0.5 * (A + A.T)
    return EliminatedSystem(
        A=A,
        b=b,
        point_ids=obs.point_ids[kept],
        S=S,
        H=H,
        SPV=SPV,
        SPc=SPc,
        kept_tracks=kept,
        kept_obs=kept_obs,
        dropped=int(np.count_nonzero(~kept)),
        condition_number=float(np.linalg.cond(A)),
    )


def tangent_basis(u: NDArray) -> NDArray:
    """Two orthonormal columns spanning the plane orthogonal to unit vector ``u``."""
    a = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = a - a.dot(u) * u
    t1 /= np.linalg.norm(t1)
    return np.column_stack([t1, np.cross(u, t1)])


def gravity_norm_step(A: NDArray, b: NDArray, z: NDArray, gamma: float) -> NDArray:
    """
    One Gauss-Newton step of ``min z^T A z - 2 b^T z`` with ``|g0| = gamma``.

    Gravity is parameterized on the sphere around the rescaled unconstrained
    estimate; the other unknowns stay linear.
    """
    dim = len(z)
    u = z[3:6] / np.linalg.norm(z[3:6])
    T = tangent_basis(u)
    z0 = z.copy()
    z0[3:6] = gamma * u
    J = np.zeros((dim, dim - 1))
    J[0:3, 0:3] = np.eye(3)
    J[3:6, 3:5] = gamma * T
    if dim == 9:
        J[6:9, 5:8] = np.eye(3)
    delta = np.linalg.solve(J.T @ A @ J, J.T @ (b - A @ z0))
    out = z0 + J @ delta
    g = u + T @ delta[3:5]
    out[3:6] = gamma * g / np.linalg.norm(g)
    return out


def solve_system(system: EliminatedSystem, options: SolverOptions = SolverOptions()) -> NDArray:
    """Solve the reduced system for ``z`` (with the optional gravity-norm step)."""
    if not system.condition_number < options.singular_threshold:
        raise IllConditioned(
            f"reduced system is singular (cond={system.condition_number:.3g})",
            system.condition_number,
        )
    z = np.linalg.solve(system.A, system.b)
    if options.enforce_gravity_norm:
        z = gravity_norm_step(system.A, system.b, z, options.gamma)
    return z


def reconstruct_points(z: NDArray, system: EliminatedSystem) -> NDArray:
    """Back-substitute points, ``m_j = H_j (sum_i P_i V_i z - sum_i P_i c_i)``; shape (M, 3)."""
    return np.einsum("mij,mj->mi", system.H, system.SPV @ z - system.SPc)


def split_state(z: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    b_a = z[6:9] if len(z) == 9 else np.zeros(3)
    return z[0:3].copy(), z[3:6].copy(), b_a.copy()


def solve_preintegrated(
    tracks: Sequence[FeatureTrack],
    preints: Preintegrals,
    calib: RigCalibration,
    options: SolverOptions = SolverOptions(),
) -> InitState:
    """:func:`solve` with the IMU preintegration already done."""
    dim = options.state_dim
    rows = build_rows(tracks, preints, calib)
    system = eliminate_points(eliminate_depths(rows, dim), options)
    z = solve_system(system, options)
    points = reconstruct_points(z, system)

    # lambda = q^T (m - p_C), p_C = V z - c
    obs = rows.obs
    keep = system.kept_obs
    track_to_point = np.full(len(obs.point_ids), -1)
    track_to_point[system.kept_tracks] = np.arange(len(system.point_ids))
    m_obs = points[track_to_point[obs.track_index[keep]]]
    p_C = np.einsum("nij,j->ni", rows.V(dim)[keep], z) - rows.c[keep]
    lam = np.einsum("ni,ni->n", rows.q[keep], m_obs - p_C)

    local = np.arange(len(obs.time)) - obs.offsets[obs.track_index]
    pid = obs.point_ids[obs.track_index]
    depths = {
        (int(p), int(i)): float(l) for p, i, l in zip(pid[keep], local[keep], lam)
    }
    v0, g0, b_a = split_state(z)
    return InitState(
        v0=v0,
        g0=g0,
        b_a=b_a,
        points={int(p): m for p, m in zip(system.point_ids, points)},
        depths=depths,
        diagnostics={
            "condition_number": system.condition_number,
            "ill_conditioned": system.condition_number > options.condition_warn_threshold,
            "negative_depth_count": int(np.count_nonzero(lam < 0)),
            "dropped_tracks": system.dropped,
            "solver": "p2o",
        },
    )


def solve(
    tracks: Sequence[FeatureTrack],
    window: ImuWindow,
    calib: RigCalibration,
    options: SolverOptions = SolverOptions(),
    b_g: ArrayLike | None = None,
) -> InitState:
    """
    Closed-form visual-inertial initialization.

    Parameters
    ----------
    tracks : sequence of FeatureTrack
    window : ImuWindow
        IMU data; its first sample defines the RCS.
    calib : RigCalibration
    options : SolverOptions
    b_g : array_like, optional
        Known gyroscope bias removed before integration.

    Returns
    -------
    InitState
        ``diagnostics`` carries the condition number of the reduced system and
        the count of negative depths (cheirality violations).

    Raises
    ------
    InsufficientParallax
        No track has parallax.
    IllConditioned
        The reduced system is numerically singular.
    """
    preints = preintegrate_tracks(tracks, window, b_g)
    state = solve_preintegrated(tracks, preints, calib, options)
    if b_g is not None:
        state.b_g = np.asarray(b_g, dtype=float).copy()
    return state
