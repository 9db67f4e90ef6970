"""
Levenberg-Marquardt refinement of an initialization on the reprojection error.

The unknowns are the initial velocity, gravity (free or on the sphere of
radius ``gamma`` through two angles), optional IMU biases and all map
points. Each observation contributes the 2-vector::

    r_i = pi(w_i) - pi(u_i),    w_i = R_Ci^T (m_j - p_Ci)

on the normalized image plane. Points are Schur-eliminated through their
3x3 blocks at every iteration, so the cost per iteration is linear in the
number of points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import GRAVITY, FeatureTrack, RigCalibration, flatten_tracks, gravity_angles, skew
from .metrics import metric_gravity, metric_velocity
from .preintegration import ImuWindow, bias_jacobians_at, integrate_rotations, preintegrate_many
from .state import InitState

CHEIRALITY_EPS = 1e-6
SERIES_RADIUS = 1e-3
BEHIND_PENALTY = 1.0


class DivergedError(RuntimeError):
    """The damped normal equations could not be solved; carries the trace so far."""

    def __init__(self, message: str, trace: list[dict] | None = None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class RefinerOptions:
    """
    Attributes
    ----------
    loss : {"squared", "cauchy"}
    cauchy_scale : float
        Cauchy scale in pixels; converted to normalized units per camera
        through its focal length.
    parameterize_gravity : bool
        Two-angle gravity on the ``gamma`` sphere (yaw fixed) instead of a free 3-vector.
    tolerance : float
        Shared threshold of the gradient, step and cost-decrease stop tests.
    initial_damping : float
        Initial damping relative to the largest diagonal entry of the normal matrix.
    """

    loss: str = "squared"
    cauchy_scale: float = 1.0
    estimate_gyro_bias: bool = False
    estimate_accel_bias: bool = False
    parameterize_gravity: bool = True
    max_iterations: int = 50
    tolerance: float = 1e-9
    initial_damping: float = 1e-3
    gamma: float = GRAVITY

    def __post_init__(self):
        if self.loss not in ("squared", "cauchy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.cauchy_scale > 0:
            raise ValueError("cauchy scale must be positive")
        if not self.tolerance > 0 or not self.initial_damping > 0:
            raise ValueError("tolerance and damping must be positive")


def gravity_from_angles(phi: ArrayLike, gamma: float = GRAVITY) -> NDArray:
    """
    ``g0(phi) = exp([phi_x, phi_y, 0]) [0, 0, gamma]``, batched over leading axes.

    ``sin(r)/r`` uses its series near zero, so the norm is ``gamma`` to
    rounding for every ``phi``.
    """
    phi = np.asarray(phi, dtype=float)
    r = np.hypot(phi[..., 0], phi[..., 1])
    s = _sinc(r)
    return gamma * np.stack([s * phi[..., 1], -s * phi[..., 0], np.cos(r)], axis=-1)


def gravity_angle_jacobian(phi: ArrayLike, gamma: float = GRAVITY) -> NDArray:
    """Derivative of :func:`gravity_from_angles`, shape (3, 2)."""
    px, py = float(phi[0]), float(phi[1])
    r = np.hypot(px, py)
    s = _sinc(r)
    if r < SERIES_RADIUS:
        # cos(r)/r^2 - sin(r)/r^3 loses all digits to cancellation near zero
        C = -1.0 / 3.0 + r**2 / 30.0 - r**4 / 840.0
    else:
        C = np.cos(r) / r**2 - np.sin(r) / r**3
    return gamma * np.array(
        [
            [px * py * C, s + py * py * C],
            [-(s + px * px * C), -px * py * C],
            [-s * px, -s * py],
        ]
    )


def _sinc(r):
    r = np.asarray(r, dtype=float)
    small = r < SERIES_RADIUS
    safe = np.where(small, 1.0, r)
    return np.where(small, 1.0 - r**2 / 6.0 + r**4 / 120.0, np.sin(safe) / safe)


@dataclass(frozen=True)
class Layout:
    """Column offsets of the refined parameter vector."""

    gravity_dim: int
    accel_bias: bool
    gyro_bias: bool
    n_points: int

    @property
    def g(self) -> slice:
        return slice(3, 3 + self.gravity_dim)

    @property
    def ba(self) -> slice:
        s = 3 + self.gravity_dim
        return slice(s, s + 3 * self.accel_bias)

    @property
    def bg(self) -> slice:
        s = self.ba.stop
        return slice(s, s + 3 * self.gyro_bias)

    @property
    def n_state(self) -> int:
        return self.bg.stop

    @property
    def size(self) -> int:
        return self.n_state + 3 * self.n_points


@dataclass(eq=False)
class Evaluation:
    r: NDArray  # (n, 2)
    w: NDArray  # (n, 3)
    valid: NDArray  # (n,) in front of the camera
    R_C: NDArray
    p_I: NDArray
    R_I: NDArray
    B: NDArray
    g0: NDArray
    b_a: NDArray
    b_g: NDArray
    points: NDArray


class RefinementProblem:
    """
    Residuals and Jacobians of the reprojection cost for fixed data.

    Tracks whose point is missing from the initial state are left out.
    """

    def __init__(
        self,
        initial: InitState,
        tracks: Sequence[FeatureTrack],
        window: ImuWindow,
        calib: RigCalibration,
        options: RefinerOptions = RefinerOptions(),
    ):
        self.options = options
        self.window = window
        self.calib = calib
        tracks = [t for t in tracks if t.point_id in initial.points]
        if not tracks:
            raise ValueError("no track has an initial point")
        self.tracks = tracks
        obs = flatten_tracks(tracks)
        self.obs = obs
        self.point_ids = obs.point_ids
        self.point_of_obs = obs.track_index
        self.t = obs.time
        self.R_C_I = calib.R_C_I[obs.camera]
        self.p_C_I = calib.p_C_I[obs.camera]
        if np.any(obs.ray[:, 2] <= 0):
            raise ValueError("observed rays must point forward")
        self.target = obs.ray[:, :2] / obs.ray[:, 2:3]
        fx = np.array([c.intrinsics.fx for c in calib.cameras])[obs.camera]
        self.loss_scale = options.cauchy_scale / fx
        self.layout = Layout(
            2 if options.parameterize_gravity else 3,
            options.estimate_accel_bias,
            options.estimate_gyro_bias,
            len(self.point_ids),
        )
        self.fixed_b_a = np.asarray(initial.b_a, dtype=float)
        self.fixed_b_g = np.asarray(initial.b_g, dtype=float)
        self._rotations = None
        if not options.estimate_gyro_bias:
            self._rotations = integrate_rotations(window, self.fixed_b_g)

    # -- packing ---------------------------------------------------------- #

    def pack(self, state: InitState) -> NDArray:
        L = self.layout
        x = np.zeros(L.size)
        x[0:3] = state.v0
        if self.options.parameterize_gravity:
            x[L.g] = gravity_angles(state.g0)[:2]
        else:
            x[L.g] = state.g0
        if L.accel_bias:
            x[L.ba] = state.b_a
        if L.gyro_bias:
            x[L.bg] = state.b_g
        x[L.n_state :] = np.array([state.points[int(p)] for p in self.point_ids]).ravel()
        return x

    def unpack(self, x: NDArray) -> dict:
        L = self.layout
        g = x[L.g]
        return {
            "v0": x[0:3].copy(),
            "g0": gravity_from_angles(g, self.options.gamma) if L.gravity_dim == 2 else g.copy(),
            "b_a": x[L.ba].copy() if L.accel_bias else self.fixed_b_a.copy(),
            "b_g": x[L.bg].copy() if L.gyro_bias else self.fixed_b_g.copy(),
            "points": x[L.n_state :].reshape(-1, 3).copy(),
        }

    def to_state(self, x: NDArray, diagnostics: dict | None = None) -> InitState:
        u = self.unpack(x)
        return InitState(
            v0=u["v0"],
            g0=u["g0"],
            b_a=u["b_a"],
            b_g=u["b_g"],
            points={int(p): m for p, m in zip(self.point_ids, u["points"])},
            diagnostics=dict(diagnostics or {}),
        )

    # -- model ------------------------------------------------------------ #

    def evaluate(self, x: NDArray) -> Evaluation:
        u = self.unpack(x)
        R = self._rotations if self._rotations is not None else integrate_rotations(self.window, u["b_g"])
        pre = preintegrate_many(self.window, self.t, u["b_g"], R)
        t = self.t[:, None]
        p_I = t * u["v0"] + 0.5 * t**2 * u["g0"] + pre.B @ u["b_a"] + pre.accum
        R_C = pre.R_I @ self.R_C_I
        p_C = p_I + np.einsum("nij,nj->ni", pre.R_I, self.p_C_I)
        m = u["points"][self.point_of_obs]
        w = np.einsum("nji,nj->ni", R_C, m - p_C)
        valid = w[:, 2] > CHEIRALITY_EPS
        z = np.where(valid, w[:, 2], 1.0)
        r = w[:, :2] / z[:, None] - self.target
        r[~valid] = 0.0
        return Evaluation(r, w, valid, R_C, p_I, pre.R_I, pre.B, u["g0"], u["b_a"], u["b_g"], u["points"])

    def residuals(self, x: NDArray) -> NDArray:
        """Stacked residuals (n, 2); observations behind the camera give zeros."""
        return self.evaluate(x).r

    def jacobian(self, x: NDArray, ev: Evaluation | None = None) -> tuple[NDArray, NDArray]:
        """
        Analytic Jacobian blocks.

        Returns
        -------
        J_state : ndarray, shape (n, 2, n_state)
        J_point : ndarray, shape (n, 2, 3)
            Derivative with respect to the observation's own point (the
            only nonzero point block of that row pair).
        """
        if ev is None:
            ev = self.evaluate(x)
        L = self.layout
        n = len(self.t)
        w = np.where(ev.valid[:, None], ev.w, np.array([0.0, 0.0, 1.0]))
        inv_z = 1.0 / w[:, 2]
        J_pi = np.zeros((n, 2, 3))
        J_pi[:, 0, 0] = J_pi[:, 1, 1] = inv_z
        J_pi[:, :, 2] = -w[:, :2] * inv_z[:, None] ** 2
        J_pi[~ev.valid] = 0.0
        JR = J_pi @ np.swapaxes(ev.R_C, -1, -2)  # d r / d m

        t = self.t[:, None, None]
        Js = np.zeros((n, 2, L.n_state))
        Js[:, :, 0:3] = -t * JR
        if L.gravity_dim == 2:
            Js[:, :, L.g] = -0.5 * t**2 * (JR @ gravity_angle_jacobian(x[L.g], self.options.gamma))
        else:
            Js[:, :, L.g] = -0.5 * t**2 * JR
        if L.accel_bias:
            Js[:, :, L.ba] = -JR @ ev.B
        if L.gyro_bias:
            J_t, X_t = bias_jacobians_at(self.window, self.t, ev.b_g, ev.b_a)
            m = ev.points[self.point_of_obs]
            y = np.einsum("nji,nj->ni", ev.R_I, m - ev.p_I)
            dw = -np.swapaxes(self.R_C_I, -1, -2) @ (
                skew(y) @ J_t + np.swapaxes(ev.R_I, -1, -2) @ X_t
            )
            Js[:, :, L.bg] = J_pi @ dw
        return Js, JR

    def dense_jacobian(self, x: NDArray) -> NDArray:
        """Full (2n, size) Jacobian; for testing."""
        Js, Jp = self.jacobian(x)
        L = self.layout
        n = len(self.t)
        J = np.zeros((n, 2, L.size))
        J[:, :, : L.n_state] = Js
        cols = L.n_state + 3 * self.point_of_obs[:, None] + np.arange(3)
        J[np.arange(n)[:, None, None], np.arange(2)[None, :, None], cols[:, None, :]] = Jp
        return J.reshape(2 * n, L.size)

    # -- cost ------------------------------------------------------------- #

    def robust(self, ev: Evaluation) -> tuple[float, NDArray]:
        """Total cost and per-observation IRLS weights."""
        s = np.einsum("ni,ni->n", ev.r, ev.r)
        if self.options.loss == "cauchy":
            c2 = self.loss_scale**2
            rho = c2 * np.log1p(s / c2)
            weight = 1.0 / (1.0 + s / c2)
            behind = np.log1p(BEHIND_PENALTY / c2) * c2
        else:
            rho = s
            weight = np.ones_like(s)
            behind = np.full_like(s, BEHIND_PENALTY)
        rho = np.where(ev.valid, rho, behind)
        weight = np.where(ev.valid, weight, 0.0)
        return float(rho.sum()), weight

    def cost(self, x: NDArray) -> float:
        return self.robust(self.evaluate(x))[0]


@dataclass(eq=False)
class RefinementResult:
    state: InitState
    trace: list[dict] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reason: str = ""


def _errors(v0, g0, truth) -> dict:
    if truth is None:
        return {"vel_err": np.nan, "grav_err_deg": np.nan}
    return {
        "vel_err": metric_velocity(v0, truth.v0),
        "grav_err_deg": metric_gravity(g0, truth.g0),
    }


def _normal_equations(problem: RefinementProblem, ev: Evaluation, x: NDArray):
    Js, Jp = problem.jacobian(x, ev)
    _, weight = problem.robust(ev)
    W = weight[:, None, None]
    r = ev.r
    starts = problem.obs.offsets[:-1]
    Hss = np.einsum("nki,nkj->ij", W * Js, Js)
    Hsp = np.add.reduceat(np.einsum("nki,nkj->nij", W * Js, Jp), starts, axis=0)  # (M, ns, 3)
    Hpp = np.add.reduceat(np.einsum("nki,nkj->nij", W * Jp, Jp), starts, axis=0)  # (M, 3, 3)
    gs = np.einsum("nki,nk->i", W * Js, r)
    gp = np.add.reduceat(np.einsum("nki,nk->ni", W * Jp, r), starts, axis=0)  # (M, 3)
    return Hss, Hsp, Hpp, gs, gp


def _damped_step(Hss, Hsp, Hpp, gs, gp, mu):
    ns = len(gs)
    Hpp_d = Hpp + mu * np.eye(3)
    Hpp_inv = np.linalg.inv(Hpp_d)
    HspHinv = Hsp @ Hpp_inv  # (M, ns, 3)
    S = Hss + mu * np.eye(ns) - np.einsum("mij,mkj->ik", HspHinv, Hsp)
    rhs = -gs + np.einsum("mij,mj->i", HspHinv, gp)
    ds = np.linalg.solve(0.5 * (S + S.T), rhs)
    dp = -np.einsum("mij,mj->mi", Hpp_inv, gp + np.einsum("mji,j->mi", Hsp, ds))
    step = np.concatenate([ds, dp.ravel()])
    if not np.all(np.isfinite(step)):
        raise np.linalg.LinAlgError("non-finite step")
    return step


def refine(
    initial: InitState,
    tracks: Sequence[FeatureTrack],
    window: ImuWindow,
    calib: RigCalibration,
    options: RefinerOptions = RefinerOptions(),
    truth=None,
) -> RefinementResult:
    """
    Levenberg-Marquardt refinement.

    Parameters
    ----------
    initial : InitState
        Starting point, typically from a closed-form solver.
    truth : object with ``v0`` and ``g0``, optional
        When given, the trace records velocity and gravity errors per iteration.

    Returns
    -------
    RefinementResult
        ``trace[0]`` is the initial state; ``trace[k]`` follows the ``k``-th
        accepted step. Accepted costs never increase.

    Raises
    ------
    ValueError
        If the initial state is not finite.
    DivergedError
        If the normal equations cannot be solved even at maximum damping.
    """
    problem = RefinementProblem(initial, tracks, window, calib, options)
    tol = options.tolerance
    x = problem.pack(initial)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state contains non-finite values")
    ev = problem.evaluate(x)
    cost = problem.robust(ev)[0]
    trace = []

    def record(it, mu, step_norm):
        u = problem.unpack(x)
        row = {
            "iter": it,
            "cost": cost,
            "damping": mu,
            "step_norm": step_norm,
            "v0": u["v0"],
            "g0": u["g0"],
            "b_a": u["b_a"],
            "b_g": u["b_g"],
        }
        row.update(_errors(u["v0"], u["g0"], truth))
        trace.append(row)

    normal = _normal_equations(problem, ev, x)
    diag_max = max(np.max(np.diag(normal[0])), np.max(np.diagonal(normal[2], axis1=1, axis2=2)))
    mu = options.initial_damping * max(diag_max, 1e-12)
    mu_max = 1e16 * max(diag_max, 1.0)
    record(0, mu, 0.0)

    it, converged, reason = 0, False, "max_iterations"
    while it < options.max_iterations:
        Hss, Hsp, Hpp, gs, gp = normal
        grad_inf = 2.0 * max(np.max(np.abs(gs)), np.max(np.abs(gp)) if len(gp) else 0.0)
        if grad_inf <= tol:
            converged, reason = True, "gradient"
            break
        accepted = False
        while not accepted:
            try:
                step = _damped_step(Hss, Hsp, Hpp, gs, gp, mu)
            except np.linalg.LinAlgError:
                if mu >= mu_max:
                    raise DivergedError("normal equations singular at maximum damping", trace)
                mu *= 10.0
                continue
            step_norm = float(np.linalg.norm(step))
            if step_norm <= tol * (np.linalg.norm(x) + tol):
                converged, reason = True, "step"
                break
            x_new = x + step
            ev_new = problem.evaluate(x_new)
            cost_new = problem.robust(ev_new)[0]
            if np.isfinite(cost_new) and cost_new <= cost:
                accepted = True
            else:
                if mu >= mu_max:
                    raise DivergedError("no cost decrease at maximum damping", trace)
                mu *= 10.0
        if not accepted:
            break
        decrease = cost - cost_new
        x, ev, cost = x_new, ev_new, cost_new
        mu = max(mu / 3.0, 1e-300)
        it += 1
        record(it, mu, step_norm)
        if decrease <= tol * max(cost + decrease, 1e-300):
            converged, reason = True, "cost"
            break
        normal = _normal_equations(problem, ev, x)

    state = problem.to_state(
        x,
        {
            "iterations": it,
            "final_cost": cost,
            "converged": converged,
            "stop_reason": reason,
            "behind_camera": int(np.count_nonzero(~ev.valid)),
            "solver": f"{initial.diagnostics.get('solver', 'init')}+lm",
        },
    )
    return RefinementResult(state, trace, it, converged, reason)


TRACE_COLUMNS = ("iter", "cost", "damping", "step_norm", "vel_err", "grav_err_deg")


def trace_rows(trace: list[dict]) -> list[list]:
    """Trace entries restricted to the CSV columns."""
    return [[row[c] for c in TRACE_COLUMNS] for row in trace]
