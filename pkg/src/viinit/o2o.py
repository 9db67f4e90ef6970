"""
Observation-to-observation baseline initializer.

Points are removed by subtracting the model equations of two observations
of the same track::

    (V_i - V_a) z + lambda_i q_i - lambda_a q_a = c_i - c_a

which leaves the motion unknowns ``z`` together with every depth. The
resulting sparse least-squares problem is solved through its normal
equations with a sparse LU factorization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import ArrayLike, NDArray

from .core import FeatureTrack, IllConditioned, InsufficientParallax, RigCalibration
from .p2o import Rows, build_rows, gravity_norm_step, preintegrate_tracks, split_state
from .preintegration import ImuWindow, Preintegrals
from .state import InitState, SolverOptions


@dataclass(frozen=True, eq=False)
class PairedSystem:
    """
    Sparse system ``M x = r`` over ``x = [z, lambda_kept]``.

    ``pairs`` holds the (anchor, other) flattened observation indices of
    every 3-row block; ``depth_index`` maps a flattened observation to its
    column among the depths (``-1`` if unused).
    """

    M: sp.csr_matrix
    r: NDArray
    pairs: NDArray  # (P, 2)
    depth_index: NDArray
    dim: int
    skipped_tracks: int


def make_pairs(counts: NDArray, offsets: NDArray, kept: NDArray, all_pairs: bool) -> NDArray:
    """Observation index pairs: each observation with the first one of its track, or all pairs."""
    out = []
    for j in np.flatnonzero(kept):
        idx = np.arange(offsets[j], offsets[j] + counts[j])
        if all_pairs:
            a, b = np.triu_indices(len(idx), k=1)
            out.append(np.column_stack([idx[a], idx[b]]))
        else:
            out.append(np.column_stack([np.full(len(idx) - 1, idx[0]), idx[1:]]))
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=int)


def build_paired_system(rows: Rows, options: SolverOptions = SolverOptions()) -> PairedSystem:
    """
    Assemble the pairwise-difference system.

    Raises
    ------
    InsufficientParallax
        If no track has at least ``min_observations_per_track`` observations.
    """
    obs = rows.obs
    dim = options.state_dim
    counts = obs.counts
    kept = counts >= options.min_observations_per_track
    if not np.any(kept):
        raise InsufficientParallax("no track has enough observations")
    pairs = make_pairs(counts, obs.offsets, kept, options.all_pairs)

    used = np.zeros(len(obs.time), dtype=bool)
    used[pairs.ravel()] = True
    depth_index = np.full(len(obs.time), -1)
    depth_index[used] = np.arange(np.count_nonzero(used))
    n_depth = int(used.sum())

    V = rows.V(dim)
    a, b = pairs[:, 0], pairs[:, 1]
    dV = V[b] - V[a]  # (P, 3, dim)
    P = len(pairs)
    row_ids = np.arange(3 * P).reshape(P, 3)

    # dense state block
    r_s = np.repeat(row_ids, dim, axis=1).ravel()
    c_s = np.tile(np.arange(dim), 3 * P)
    v_s = dV.reshape(-1)
    # depth columns: +q_b for lambda_b, -q_a for lambda_a
    r_d = np.concatenate([row_ids.ravel(), row_ids.ravel()])
    c_d = dim + np.concatenate([np.repeat(depth_index[b], 3), np.repeat(depth_index[a], 3)])
    v_d = np.concatenate([rows.q[b].ravel(), -rows.q[a].ravel()])

    M = sp.csr_matrix(
        (np.concatenate([v_s, v_d]), (np.concatenate([r_s, r_d]), np.concatenate([c_s, c_d]))),
        shape=(3 * P, dim + n_depth),
    )
    r = (rows.c[b] - rows.c[a]).ravel()
    return PairedSystem(M, r, pairs, depth_index, dim, int(np.count_nonzero(~kept)))


def solve_paired(system: PairedSystem, options: SolverOptions = SolverOptions()) -> tuple[NDArray, float]:
    """
    Least-squares solution through sparse normal equations.

    Returns the solution and a condition estimate (ratio of extreme pivots of
    the LU factor; a cheap proxy, exact for diagonal systems).

    Raises
    ------
    IllConditioned
        If the factorization is singular or the pivot ratio exceeds
        ``options.singular_threshold``.
    """
    N = (system.M.T @ system.M).tocsc()
    rhs = system.M.T @ system.r
    # equilibrate so the pivot ratio is scale free
    d = np.sqrt(np.maximum(N.diagonal(), np.finfo(float).tiny))
    Dinv = sp.diags(1.0 / d)
    Ns = (Dinv @ N @ Dinv).tocsc()
    try:
        lu = spla.splu(Ns)
    except RuntimeError as exc:
        raise IllConditioned(f"pairwise normal equations are singular ({exc})") from exc
    piv = np.abs(lu.U.diagonal())
    cond = float(piv.max() / piv.min()) if piv.min() > 0 else np.inf
    if not cond < options.singular_threshold:
        raise IllConditioned(f"pairwise normal equations are singular (cond~{cond:.3g})", cond)
    x = lu.solve(rhs / d) / d
    if options.enforce_gravity_norm:
        x = _gravity_norm_sparse(system, N.tocsr(), rhs, x, options.gamma)
    return x, cond


def _gravity_norm_sparse(system, N, rhs, x, gamma):
    """Gravity-norm Gauss-Newton step on the motion block after eliminating the depths."""
    dim = system.dim
    Nzz = N[:dim, :dim].toarray()
    Nzl = N[:dim, dim:].toarray()
    Nll = N[dim:, dim:].tocsc()
    lu = spla.splu(Nll)
    X = lu.solve(np.ascontiguousarray(Nzl.T))
    A = Nzz - Nzl @ X
    b = rhs[:dim] - Nzl @ lu.solve(rhs[dim:])
    z = gravity_norm_step(0.5 * (A + A.T), b, x[:dim], gamma)
    lam = lu.solve(rhs[dim:] - Nzl.T @ z)
    return np.concatenate([z, lam])


def solve_preintegrated(
    tracks: Sequence[FeatureTrack],
    preints: Preintegrals,
    calib: RigCalibration,
    options: SolverOptions = SolverOptions(),
) -> InitState:
    """:func:`solve` with the IMU preintegration already done."""
    rows = build_rows(tracks, preints, calib)
    system = build_paired_system(rows, options)
    x, cond = solve_paired(system, options)
    dim = system.dim
    z = x[:dim]
    obs = rows.obs
    used = system.depth_index >= 0
    lam = np.full(len(obs.time), np.nan)
    lam[used] = x[dim + system.depth_index[used]]

    # each observation implies a point; average them per track
    p_C = np.einsum("nij,j->ni", rows.V(dim), z) - rows.c
    implied = p_C + lam[:, None] * rows.q
    points, spread = {}, {}
    local = np.arange(len(obs.time)) - obs.offsets[obs.track_index]
    depths = {}
    for j, pid in enumerate(obs.point_ids):
        sl = slice(obs.offsets[j], obs.offsets[j + 1])
        sel = used[sl]
        if not np.any(sel):
            continue
        cand = implied[sl][sel]
        m = cand.mean(axis=0)
        points[int(pid)] = m
        spread[int(pid)] = float(np.max(np.linalg.norm(cand - m, axis=1)))
        for i, l in zip(local[sl][sel], lam[sl][sel]):
            depths[(int(pid), int(i))] = float(l)

    v0, g0, b_a = split_state(z)
    lam_used = lam[used]
    return InitState(
        v0=v0,
        g0=g0,
        b_a=b_a,
        points=points,
        depths=depths,
        diagnostics={
            "condition_number": cond,
            "ill_conditioned": cond > options.condition_warn_threshold,
            "negative_depth_count": int(np.count_nonzero(lam_used < 0)),
            "dropped_tracks": system.skipped_tracks,
            "point_spread_max": max(spread.values()) if spread else 0.0,
            "pairs": int(len(system.pairs)),
            "solver": "o2o",
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
    Pairwise-difference initialization (baseline).

    Same inputs and output as :func:`viinit.p2o.solve`. Tracks with fewer
    than ``options.min_observations_per_track`` observations are skipped.
    ``diagnostics["condition_number"]`` is an LU pivot-ratio estimate.
    """
    preints = preintegrate_tracks(tracks, window, b_g)
    state = solve_preintegrated(tracks, preints, calib, options)
    if b_g is not None:
        state.b_g = np.asarray(b_g, dtype=float).copy()
    return state
