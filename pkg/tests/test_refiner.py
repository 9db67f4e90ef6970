import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from viinit import o2o, p2o, refiner
from viinit import simulator as sm
from viinit.core import GRAVITY, flatten_tracks, gravity_angles
from viinit.io import save_trace
from viinit.refiner import (
    TRACE_COLUMNS,
    DivergedError,
    RefinementProblem,
    RefinerOptions,
    gravity_angle_jacobian,
    gravity_from_angles,
    refine,
)
from viinit.state import InitState

OPTION_SETS = [
    RefinerOptions(),
    RefinerOptions(parameterize_gravity=False),
    RefinerOptions(estimate_accel_bias=True, estimate_gyro_bias=True),
    RefinerOptions(parameterize_gravity=False, estimate_gyro_bias=True, loss="cauchy"),
]


def truth_state(win):
    t = win.truth
    return InitState(v0=t.v0, g0=t.g0, b_a=t.b_a, b_g=t.gyro_bias, points=dict(t.points))


def perturbed_state(win, rng, scale=1.0):
    s = truth_state(win)
    return InitState(
        v0=s.v0 + 0.05 * scale * rng.normal(size=3),
        g0=s.g0 + 0.2 * scale * rng.normal(size=3),
        b_a=s.b_a + 0.05 * scale * rng.normal(size=3),
        b_g=s.b_g + 0.01 * scale * rng.normal(size=3),
        points={k: m + 0.05 * scale * rng.normal(size=3) for k, m in s.points.items()},
    )


@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(-20, 0))
def test_gravity_parameterization_has_exact_norm(a, b, log_scale):
    phi = np.array([a, b]) * 10.0**log_scale
    assert np.linalg.norm(gravity_from_angles(phi)) == pytest.approx(GRAVITY, rel=2e-16 * 4)


@pytest.mark.parametrize("phi", [[0.0, 0.0], [1e-12, -3e-12], [4e-4, 7e-4], [2e-3, -1e-3], [0.3, -1.2], [2.0, 1.5]])
def test_gravity_angle_jacobian_finite_difference(phi):
    phi = np.array(phi)
    eps = 1e-7
    num = np.column_stack(
        [(gravity_from_angles(phi + eps * e) - gravity_from_angles(phi - eps * e)) / (2 * eps) for e in np.eye(2)]
    )
    np.testing.assert_allclose(gravity_angle_jacobian(phi), num, atol=1e-6)


def test_gravity_angles_roundtrip():
    g = np.array([0.3, 9.5, -2.0])
    g = GRAVITY * g / np.linalg.norm(g)
    np.testing.assert_allclose(gravity_from_angles(gravity_angles(g)[:2]), g, atol=1e-12)


@pytest.mark.parametrize("readout", [0.0, 0.01])
def test_residuals_vanish_at_ground_truth(readout):
    spec = sm.SimulationSpec(
        max_windows=1,
        frame_readout=readout,
        noise=sm.NoiseSpec(gyro_bias=(0.01, 0.0, -0.02), accel_bias=(0.1, 0.1, 0.0)),
    )
    w = sm.simulate(spec, seed=0)[0]
    for opts in OPTION_SETS:
        prob = RefinementProblem(truth_state(w), w.tracks, w.imu, w.calib, opts)
        assert np.max(np.abs(prob.residuals(prob.pack(truth_state(w))))) < 1e-10


def test_projection_is_invariant_along_the_ray(clean_window):
    w = clean_window
    s = truth_state(w)
    prob = RefinementProblem(s, w.tracks, w.imu, w.calib)
    x = prob.pack(s)
    ev = prob.evaluate(x)
    i = 0
    j = prob.point_of_obs[i]
    delta = 0.3
    # move the point by delta in camera depth along its own ray
    k = prob.layout.n_state + 3 * j
    x2 = x.copy()
    x2[k : k + 3] += ev.R_C[i] @ (ev.w[i] / ev.w[i, 2] * delta)
    r2 = prob.residuals(x2)
    assert np.linalg.norm(r2[i] - ev.r[i]) < 1e-10 * delta


def test_cauchy_cost_is_below_squared(noisy_window):
    w = noisy_window
    s = p2o.solve(w.tracks, w.imu, w.calib)
    noisy = sm.add_pixel_noise(w.tracks, w.calib, 0.0, np.random.default_rng(0), outlier_fraction=0.05)
    sq = RefinementProblem(s, noisy, w.imu, w.calib, RefinerOptions())
    ca = RefinementProblem(s, noisy, w.imu, w.calib, RefinerOptions(loss="cauchy"))
    x = sq.pack(s)
    assert ca.cost(x) <= sq.cost(x)
    ev = ca.evaluate(x)
    _, weight = ca.robust(ev)
    assert np.all((weight > 0) & (weight <= 1))


@pytest.mark.parametrize("opts", OPTION_SETS)
def test_jacobian_matches_finite_differences(small_window, opts):
    w = small_window.realize(sm.NoiseSpec(pixel_sigma=0.5), np.random.default_rng(1))
    s = perturbed_state(w, np.random.default_rng(2))
    prob = RefinementProblem(s, w.tracks, w.imu, w.calib, opts)
    x = prob.pack(s)
    J = prob.dense_jacobian(x)
    eps = 1e-6
    for k in range(prob.layout.size):
        e = np.zeros_like(x)
        e[k] = eps
        col = ((prob.residuals(x + e) - prob.residuals(x - e)) / (2 * eps)).ravel()
        scale = max(np.max(np.abs(col)), 1e-12)
        assert np.max(np.abs(J[:, k] - col)) / scale < 1e-4


def test_jacobian_sparsity(small_window):
    s = truth_state(small_window)
    prob = RefinementProblem(s, small_window.tracks, small_window.imu, small_window.calib, OPTION_SETS[2])
    J = prob.dense_jacobian(prob.pack(s))
    ns = prob.layout.n_state
    for i, j in enumerate(prob.point_of_obs):
        blk = J[2 * i : 2 * i + 2, ns:]
        nz = np.flatnonzero(np.any(blk != 0, axis=0))
        assert set(nz) <= set(range(3 * j, 3 * j + 3))


def test_start_at_ground_truth_stops_immediately(clean_window):
    w = clean_window
    res = refine(truth_state(w), w.tracks, w.imu, w.calib)
    assert res.iterations <= 2
    assert abs(res.trace[-1]["cost"] - res.trace[0]["cost"]) < 1e-12


@pytest.mark.parametrize("start", ["p2o", "o2o"])
def test_cost_is_monotone_and_errors_drop(noisy_window, start):
    w = noisy_window
    mod = p2o if start == "p2o" else o2o
    res = refine(mod.solve(w.tracks, w.imu, w.calib), w.tracks, w.imu, w.calib, truth=w.truth)
    costs = [r["cost"] for r in res.trace]
    assert np.all(np.diff(costs) <= 0)
    assert res.trace[-1]["vel_err"] < res.trace[0]["vel_err"]
    assert res.converged
    assert np.linalg.norm(res.state.g0) == pytest.approx(GRAVITY, rel=1e-14)
    assert list(res.trace[0])[:4] == ["iter", "cost", "damping", "step_norm"]


def test_gyro_bias_recovery():
    b_g = 0.05 * np.array([0.6, -0.48, 0.64])
    spec = sm.SimulationSpec(max_windows=1, noise=sm.NoiseSpec(gyro_bias=tuple(b_g)))
    w = sm.simulate(spec, seed=6)[0]
    init = p2o.solve(w.tracks, w.imu, w.calib)
    res = refine(init, w.tracks, w.imu, w.calib, RefinerOptions(estimate_gyro_bias=True, max_iterations=15))
    assert res.iterations <= 15
    assert np.linalg.norm(res.state.b_g - b_g) < 0.1 * np.linalg.norm(b_g)


def test_gravity_parameterization_is_a_constrained_minimum(noisy_window):
    w = noisy_window
    res = refine(p2o.solve(w.tracks, w.imu, w.calib), w.tracks, w.imu, w.calib, RefinerOptions(tolerance=1e-12))
    s = res.state
    free = RefinementProblem(s, w.tracks, w.imu, w.calib, RefinerOptions(parameterize_gravity=False))
    x = free.pack(s)
    ev = free.evaluate(x)
    Js, _ = free.jacobian(x, ev)
    grad_g = 2 * np.einsum("nki,nk->i", Js[:, :, 3:6], ev.r)
    u = s.g0 / np.linalg.norm(s.g0)
    tangent = grad_g - (grad_g @ u) * u
    assert np.linalg.norm(tangent) < 1e-6


def test_points_behind_camera_are_ignored(clean_window):
    w = clean_window
    s = truth_state(w)
    pid = next(iter(s.points))
    s.points[pid] = -s.points[pid]
    prob = RefinementProblem(s, w.tracks, w.imu, w.calib)
    ev = prob.evaluate(prob.pack(s))
    assert not np.all(ev.valid)
    assert np.all(ev.r[~ev.valid] == 0)
    _, weight = prob.robust(ev)
    assert np.all(weight[~ev.valid] == 0)
    Js, Jp = prob.jacobian(prob.pack(s), ev)
    assert np.all(Js[~ev.valid] == 0) and np.all(Jp[~ev.valid] == 0)


def test_nonfinite_initial_state_is_rejected(clean_window):
    w = clean_window
    s = truth_state(w)
    s.v0 = np.array([np.nan, 0.0, 0.0])
    with pytest.raises(ValueError):
        refine(s, w.tracks, w.imu, w.calib)


def test_singular_system_raises_diverged_error(noisy_window, monkeypatch):
    def singular(*args):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setattr(refiner, "_damped_step", singular)
    w = noisy_window
    with pytest.raises(DivergedError) as err:
        refine(p2o.solve(w.tracks, w.imu, w.calib), w.tracks, w.imu, w.calib)
    assert len(err.value.trace) == 1


def test_options_validation():
    with pytest.raises(ValueError):
        RefinerOptions(max_iterations=0)
    with pytest.raises(ValueError):
        RefinerOptions(loss="huber")
    with pytest.raises(ValueError):
        RefinerOptions(loss="cauchy", cauchy_scale=0.0)


def test_trace_csv(tmp_path, noisy_window):
    w = noisy_window
    res = refine(p2o.solve(w.tracks, w.imu, w.calib), w.tracks, w.imu, w.calib, RefinerOptions(max_iterations=3))
    save_trace(res.trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == len(res.trace) + 1
    # no ground truth: error columns are left empty
    assert lines[1].endswith(",,")


def test_missing_points_drop_tracks(noisy_window):
    w = noisy_window
    s = p2o.solve(w.tracks, w.imu, w.calib)
    dropped = flatten_tracks(w.tracks).point_ids[:5]
    for k in dropped:
        del s.points[int(k)]
    prob = RefinementProblem(s, w.tracks, w.imu, w.calib)
    assert set(prob.point_ids).isdisjoint(set(dropped.tolist()))
