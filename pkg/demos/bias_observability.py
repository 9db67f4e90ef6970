"""
When can the accelerometer bias be estimated?

Without rotation the bias enters every row exactly like gravity, so the
biased system is singular. Rotating about two axes separates them.
"""

import numpy as np

from viinit import p2o
from viinit import simulator as sm
from viinit.core import IllConditioned
from viinit.state import SolverOptions

opts = SolverOptions(estimate_accel_bias=True)
b_a = np.array([0.15, -0.1, 0.2])
rig = sm.default_rig()

cases = {
    "static": (sm.TrajectorySpec(kind="static", duration=2.0), 0.2),
    "walking": (sm.TrajectorySpec(kind="walk_forward"), 3.0),
    "rotating": (sm.TrajectorySpec(kind="rotating", duration=6.0), 3.0),
}
for name, (traj_spec, start) in cases.items():
    traj = sm.Trajectory(traj_spec)
    frames = sm.FrameWindow(tuple(start + 0.1 * np.arange(8)))
    w = sm.make_window(traj, rig, frames, accel_bias=b_a, rng=np.random.default_rng(0))
    rows = p2o.build_rows(w.tracks, p2o.preintegrate_tracks(w.tracks, w.imu), w.calib)
    sv = np.linalg.svd(p2o.eliminate_points(p2o.eliminate_depths(rows, 9), opts).A, compute_uv=False)
    try:
        s = p2o.solve(w.tracks, w.imu, w.calib, opts)
        # the solver returns the additive correction, minus the sensor bias
        result = f"bias error {100 * np.linalg.norm(-s.b_a - b_a) / np.linalg.norm(b_a):.3f}%"
    except IllConditioned as exc:
        result = f"rejected ({exc})"
    print(f"{name:>8}: sigma_min / sigma_max = {sv[-1] / sv[0]:.1e}, {result}")
