"""
Nonlinear refinement started from each closed-form solution.

Prints the velocity and gravity error after every accepted step; the
convergence criterion is 2.5% velocity and 0.25 deg gravity error.
"""

from viinit import o2o, p2o
from viinit import simulator as sm
from viinit.refiner import RefinerOptions, refine

spec = sm.SimulationSpec(max_windows=1, noise=sm.NoiseSpec(pixel_sigma=0.3, accel_noise_density=2e-3))
win = sm.simulate(spec, seed=4)[0]

for name, mod in (("p2o", p2o), ("o2o", o2o)):
    init = mod.solve(win.tracks, win.imu, win.calib)
    res = refine(init, win.tracks, win.imu, win.calib, RefinerOptions(max_iterations=15), truth=win.truth)
    print(f"from {name}: {res.iterations} iterations, stop: {res.reason}")
    for e in res.trace:
        print(f"  {e['iter']:2d}  cost {e['cost']:.4e}  velocity {100 * e['vel_err']:6.2f}%  gravity {e['grav_err_deg']:.3f} deg")
