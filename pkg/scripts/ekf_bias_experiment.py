"""Heading filter under different gyro biases.

Drives the S-curve path with each bias and several seeds and prints yaw
RMSE after settling plus the final bias estimate.

    python3 scripts/ekf_bias_experiment.py --bias 0 0.25 0.5 1.0 --seeds 5
"""
import argparse
import math

import numpy as np

from cropmap import fieldsim as fs
from cropmap.pose import RigConfig, TrackReport, default_mount, estimate_track, wrap_angle


def run(bias_deg, seed, settle, lead):
    field = fs.FieldSpec(parcel_rows=1, parcel_cols=2, soil_coeffs=(0, 0, 0, 0, 0, 0))
    spec = fs.TrajectorySpec(gyro_bias=math.radians(bias_deg))
    res = fs.simulate_trajectory(spec, field, seed, path=fs.Path.s_curve(lead=lead, radius=8.0))
    rep = TrackReport()
    track = estimate_track(res.imu, res.gnss, RigConfig(2.5, default_mount()), field.frame(), report=rep)
    yaw = res.trajectory.state(track.t)[3]
    m = track.t >= res.trajectory.t_start + settle
    rmse = math.degrees(math.sqrt(np.mean(np.asarray(wrap_angle(track.yaw - yaw))[m] ** 2)))
    return rmse, math.degrees(rep.final_bias)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bias", type=float, nargs="+", default=[0.0, 0.25, 0.5, 1.0], help="deg/s")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--settle", type=float, default=10.0, help="s")
    ap.add_argument("--lead", type=float, default=25.0, help="straight lead-in, m")
    a = ap.parse_args()
    print(f"{'bias':>6} {'rmse_mean':>10} {'rmse_max':>9} {'est_mean':>9} {'est_sd':>7}")
    for b in a.bias:
        r = np.array([run(b, s, a.settle, a.lead) for s in range(a.seeds)])
        print(f"{b:6.2f} {r[:, 0].mean():10.3f} {r[:, 0].max():9.3f} {r[:, 1].mean():9.3f} {r[:, 1].std():7.3f}")


if __name__ == "__main__":
    main()
