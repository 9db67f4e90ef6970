import numpy as np
import pytest

from viinit import simulator as sm
from viinit.core import flatten_tracks
from viinit.p2o import build_rows, preintegrate_tracks
from viinit.preintegration import preintegrate_many


def closure_residuals(win):
    """Per-observation residual of the linear model at the ground truth."""
    truth = win.truth
    pre = preintegrate_tracks(win.tracks, win.imu, truth.gyro_bias)
    rows = build_rows(win.tracks, pre, win.calib)
    obs = rows.obs
    local = np.arange(len(obs.time)) - obs.offsets[obs.track_index]
    pid = obs.point_ids[obs.track_index]
    lam = np.array([truth.depths[(int(p), int(i))] for p, i in zip(pid, local)])
    m = np.array([truth.points[int(p)] for p in pid])
    t = rows.t[:, None]
    lhs = t * truth.v0 + 0.5 * t**2 * truth.g0 + rows.B @ truth.b_a - m + lam[:, None] * rows.q
    return lhs - rows.c


def static_window(readout=0.0, n_points=100, frames=(0.2, 0.3, 0.4)):
    traj = sm.Trajectory(sm.TrajectorySpec(kind="static", duration=2.0))
    calib = sm.default_rig(frame_readout=readout)
    return sm.make_window(traj, calib, sm.FrameWindow(frames), n_points, rng=np.random.default_rng(0))


def test_static_readings():
    traj = sm.Trajectory(sm.TrajectorySpec(kind="static", duration=1.0))
    imu, truth = sm.sample_imu(traj, 800.0)
    np.testing.assert_allclose(imu.gyro, 0.0, atol=1e-14)
    np.testing.assert_allclose(imu.accel, -truth.g0 + np.zeros_like(imu.accel), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(truth.g0), sm.GRAVITY)


def test_free_fall_is_weightless():
    traj = sm.Trajectory(sm.TrajectorySpec(kind="free_fall", duration=0.5))
    imu, _ = sm.sample_imu(traj, 800.0)
    np.testing.assert_allclose(imu.accel, 0.0, atol=1e-9)


@pytest.mark.parametrize("kind", ["walk_forward", "head_moving", "running", "rotating"])
def test_preintegration_reproduces_trajectory(kind):
    traj = sm.Trajectory(sm.TrajectorySpec(kind=kind))
    t0 = 2.3
    imu, truth = sm.sample_imu(traj, 800.0, t_start=t0, duration=0.5)
    t = imu.times
    pre = preintegrate_many(imu, t)
    p_model = t[:, None] * truth.v0 + 0.5 * t[:, None] ** 2 * truth.g0 + pre.accum
    p_world = traj.position(t0 + t) - traj.position(t0)
    p_true = p_world @ truth.R_W.T
    assert np.max(np.linalg.norm(p_model - p_true, axis=1)) < 1e-4
    # orientation agrees with the analytic attitude at every sample
    R_true = truth.R_W @ traj.rotation(t0 + t)
    np.testing.assert_allclose(pre.R_I, R_true, atol=1e-9)


def test_trajectory_velocity_is_derivative_of_position():
    traj = sm.Trajectory(sm.TrajectorySpec(kind="walk_forward"))
    t = np.linspace(0.5, 12.0, 40)
    eps = 1e-5
    v_num = (traj.position(t + eps) - traj.position(t - eps)) / (2 * eps)
    a_num = (traj.velocity(t + eps) - traj.velocity(t - eps)) / (2 * eps)
    np.testing.assert_allclose(traj.velocity(t), v_num, atol=1e-7)
    np.testing.assert_allclose(traj.acceleration(t), a_num, atol=1e-5)


def test_trajectory_spec_validation():
    with pytest.raises(ValueError):
        sm.TrajectorySpec(kind="teleport")
    with pytest.raises(ValueError):
        sm.NoiseSpec(pixel_sigma=-1.0)


def test_single_point_on_optical_axis():
    cam = sm.default_rig().cameras[0]
    R, p = np.eye(3), np.zeros(3)
    pts, px = sm.generate_points(R, p, 1, (1.0, 15.0), cam, np.random.default_rng(0))
    np.testing.assert_allclose(px[0], [cam.intrinsics.cx, cam.intrinsics.cy])
    np.testing.assert_allclose(pts[0, :2], 0.0, atol=1e-12)
    assert 1.0 <= pts[0, 2] <= 15.0


def test_point_grid_and_roundtrip():
    cam = sm.default_rig().cameras[0]
    R, p = sm.exp_so3([0.1, -0.2, 0.3]), np.array([0.5, -0.1, 0.2])
    pts, px = sm.generate_points(R, p, 100, (1.0, 15.0), cam, np.random.default_rng(1))
    depth = (pts - p) @ R[:, 2]
    assert np.all((depth >= 1.0) & (depth <= 15.0))
    assert len(np.unique(px[:, 0])) * len(np.unique(px[:, 1])) == 100
    assert np.ptp(np.diff(np.unique(px[:, 0]))) < 1e-9
    w = (pts - p) @ R
    np.testing.assert_allclose(cam.intrinsics.to_pixel(w), px, atol=1e-9)


def test_generate_points_rejects_zero():
    cam = sm.default_rig().cameras[0]
    with pytest.raises(ValueError):
        sm.generate_points(np.eye(3), np.zeros(3), 0, (1, 2), cam, np.random.default_rng(0))


def test_global_shutter_shares_frame_time(clean_window):
    frame_times = set(np.round(clean_window.frame_times, 12))
    for tr in clean_window.tracks:
        for o in tr.observations:
            assert round(o.time, 12) in frame_times


def test_rolling_shutter_row_times():
    dt = 0.01 / 480
    win = static_window(readout=0.01, n_points=4)
    truth, calib = win.truth, win.calib
    cam = calib.cameras[0]
    R_C, p_C = truth.camera_pose(0.05, cam)
    K_inv = np.linalg.inv(cam.intrinsics.K)
    # rows just inside the image so rounding cannot push them out
    rows = (1e-6, 479.0 - 1e-6)
    pts = np.array([p_C[0] + R_C[0] @ (5.0 * K_inv @ [319.5, r, 1.0]) for r in rows])
    tracks = sm.observe(pts, truth, calib, [0.05, 0.15])
    times = {tr.point_id: [o.time for o in tr.observations if o.camera_index == 0][0] for tr in tracks}
    assert times[1] - times[0] == pytest.approx(479 * dt, abs=1e-9)
    assert times[0] == pytest.approx(0.05, abs=1e-9)


@pytest.mark.parametrize("readout", [0.0, 0.01])
@pytest.mark.parametrize("kind", ["walk_forward", "head_moving"])
def test_closure(kind, readout):
    spec = sm.SimulationSpec(
        trajectory=sm.TrajectorySpec(kind=kind, turn_rate=2.0),
        frame_readout=readout,
        max_windows=1,
        noise=sm.NoiseSpec(gyro_bias=(0.01, -0.02, 0.015), accel_bias=(0.1, 0.05, -0.08)),
    )
    win = sm.simulate(spec, seed=2)[0]
    assert np.max(np.abs(closure_residuals(win))) < 1e-9


def test_rolling_shutter_fixed_point_is_self_consistent():
    spec = sm.SimulationSpec(
        trajectory=sm.TrajectorySpec(kind="head_moving", turn_rate=2.0), frame_readout=0.01, max_windows=1
    )
    win = sm.simulate(spec, seed=4)[0]
    frames = win.frame_times
    for tr in win.tracks:
        for o in tr.observations:
            cam = win.calib.cameras[o.camera_index]
            tau = frames[np.argmin(np.abs(frames - (o.time - o.pixel[1] * cam.row_readout)))]
            assert abs(tau + o.pixel[1] * cam.row_readout - o.time) < 1e-9


def test_determinism():
    spec = sm.SimulationSpec(max_windows=2, noise=sm.NoiseSpec(pixel_sigma=0.5, gyro_noise_density=1e-3))
    a, b = sm.simulate(spec, seed=9), sm.simulate(spec, seed=9)
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa.imu.gyro, wb.imu.gyro)
        np.testing.assert_array_equal(flatten_tracks(wa.tracks).pixel, flatten_tracks(wb.tracks).pixel)
    c = sm.simulate(spec, seed=10)[0]
    assert not np.array_equal(flatten_tracks(a[0].tracks).pixel, flatten_tracks(c.tracks).pixel)


def test_pixel_noise_level(clean_window):
    sigma = 0.7
    rng = np.random.default_rng(3)
    clean = flatten_tracks(clean_window.tracks).pixel
    diffs = []
    while sum(len(d) for d in diffs) < 10_000:
        noisy = sm.add_pixel_noise(clean_window.tracks, clean_window.calib, sigma, rng)
        diffs.append(flatten_tracks(noisy).pixel - clean)
    d = np.concatenate(diffs).ravel()
    assert abs(d.std() / sigma - 1.0) < 0.03


def test_noisy_rays_follow_pixels(noisy_window):
    arr = flatten_tracks(noisy_window.tracks)
    for cam_idx, cam in enumerate(noisy_window.calib.cameras):
        sel = arr.camera == cam_idx
        np.testing.assert_allclose(cam.intrinsics.pixel_to_ray(arr.pixel[sel]), arr.ray[sel], atol=1e-14)


def test_outlier_injection_moves_some_pixels(clean_window):
    noisy = sm.add_pixel_noise(clean_window.tracks, clean_window.calib, 0.0, np.random.default_rng(0), 0.2)
    moved = np.linalg.norm(flatten_tracks(noisy).pixel - flatten_tracks(clean_window.tracks).pixel, axis=1) > 0
    assert 0.1 < moved.mean() < 0.3


def test_window_integration_time(clean_window):
    assert clean_window.integration_time == pytest.approx(0.4, abs=1e-9)


def test_downsampling_sweep_spans_integration_range():
    traj = sm.Trajectory(sm.TrajectorySpec())
    frames = np.arange(390) / 30
    spans = []
    for nf in range(1, 10):
        w = sm.window_select(frames, 5, nf, 0.01, traj, max_windows=1)[0]
        spans.append(w.frame_times[-1] - w.frame_times[0])
    assert spans[0] == pytest.approx(4 / 30)
    assert spans[-1] == pytest.approx(36 / 30)
    assert np.all(np.diff(spans) > 0)


def test_static_sequence_has_no_windows():
    traj = sm.Trajectory(sm.TrajectorySpec(kind="static"))
    with pytest.raises(sm.EmptySelection):
        sm.window_select(np.arange(300) / 30, 5, 3, 0.01, traj)


def test_slow_start_is_skipped():
    traj = sm.Trajectory(sm.TrajectorySpec())
    windows = sm.window_select(np.arange(390) / 30, 5, 3, 0.01, traj)
    for w in windows:
        assert np.linalg.norm(traj.velocity(w.frame_times[0])) >= 0.01
    assert windows[0].frame_times[0] > 1.0


def test_bias_walk_changes_biases_between_windows():
    spec = sm.SimulationSpec(max_windows=3, noise=sm.NoiseSpec(bias_walk=0.01))
    ws = sm.simulate(spec, seed=0)
    assert not np.allclose(ws[0].truth.gyro_bias, ws[1].truth.gyro_bias)
    assert np.max(np.abs(closure_residuals(ws[2]))) < 1e-9


def test_frame_start_times_remove_row_offsets():
    win = static_window(readout=0.01, n_points=20)
    gs = sm.frame_start_times(win.tracks, win.calib)
    starts = set(np.round(win.frame_times, 9))
    for tr in gs:
        for o in tr.observations:
            assert round(o.time, 9) in starts
