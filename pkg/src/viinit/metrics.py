"""Error metrics of an initialization against ground truth."""

from __future__ import annotations

from typing import Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray


def metric_velocity(v_hat: ArrayLike, v_gt: ArrayLike) -> float:
    """
    Relative vector error ``|v_hat - v_gt| / |v_gt|``.

    Returns ``nan`` when the true velocity is zero (excluded row).
    """
    v_hat, v_gt = np.asarray(v_hat, dtype=float), np.asarray(v_gt, dtype=float)
    norm = np.linalg.norm(v_gt)
    if norm == 0.0:
        return float("nan")
    return float(np.linalg.norm(v_hat - v_gt) / norm)


def metric_speed(v_hat: ArrayLike, v_gt: ArrayLike) -> float:
    """Absolute speed error ``||v_hat| - |v_gt||`` in m/s."""
    return float(abs(np.linalg.norm(v_hat) - np.linalg.norm(v_gt)))


def metric_gravity(g_hat: ArrayLike, g_gt: ArrayLike) -> float:
    """
    Angle between gravity directions in degrees; ``nan`` for a zero vector.

    Computed as ``atan2(|a x b|, a . b)``, which equals the clamped arccos of
    the normalized dot product but keeps full precision near 0 and 180 degrees.
    """
    g_hat, g_gt = np.asarray(g_hat, dtype=float), np.asarray(g_gt, dtype=float)
    if np.linalg.norm(g_hat) == 0.0 or np.linalg.norm(g_gt) == 0.0:
        return float("nan")
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(g_hat, g_gt)), g_hat @ g_gt)))


def metric_points(
    points_hat: Mapping[int, ArrayLike],
    points_gt: Mapping[int, ArrayLike],
    ref_R_C: NDArray,
    ref_p_C: NDArray,
) -> tuple[float, int]:
    """
    Mean point error normalized by depth in the reference camera.

    Returns
    -------
    error : float
        ``mean_j |m_hat_j - m_j| / depth_j`` over ids present in both maps.
    unmatched : int
        Number of estimated or true ids without a counterpart.
    """
    common = sorted(set(points_hat) & set(points_gt))
    unmatched = len(set(points_hat) ^ set(points_gt))
    if not common:
        return float("nan"), unmatched
    est = np.array([points_hat[k] for k in common], dtype=float)
    gt = np.array([points_gt[k] for k in common], dtype=float)
    depth = (gt - ref_p_C) @ ref_R_C[:, 2]
    return float(np.mean(np.linalg.norm(est - gt, axis=1) / depth)), unmatched


def converged(vel_err: float, grav_err_deg: float, vel_tol: float = 0.025, grav_tol: float = 0.25) -> bool:
    """Convergence criterion on velocity and gravity errors (strict inequalities)."""
    return bool(vel_err < vel_tol and grav_err_deg < grav_tol)
