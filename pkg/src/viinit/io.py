"""
On-disk formats.

A window directory holds ``imu.csv``, ``tracks.json``, ``calibration.json``
and, for simulated data, ``ground_truth.json``.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FeatureTrack, Observation, RigCalibration, load_calibration, save_calibration
from .preintegration import ImuWindow, load_imu_csv, save_imu_csv
from .refiner import TRACE_COLUMNS
from .simulator import GroundTruth, SimWindow

IMU_FILE = "imu.csv"
TRACKS_FILE = "tracks.json"
CALIB_FILE = "calibration.json"
TRUTH_FILE = "ground_truth.json"


class DataError(ValueError):
    """Malformed or missing input data."""


def tracks_to_dict(tracks: Sequence[FeatureTrack]) -> dict:
    return {
        "tracks": [
            {
                "point_id": int(t.point_id),
                "obs": [
                    {"cam": o.camera_index, "pixel": o.pixel.tolist(), "ray": o.ray.tolist(), "t": o.time}
                    for o in t.observations
                ],
            }
            for t in tracks
        ]
    }


def tracks_from_dict(d: dict) -> list[FeatureTrack]:
    try:
        return [
            FeatureTrack(
                int(t["point_id"]),
                tuple(Observation(int(o["cam"]), o["pixel"], o["ray"], float(o["t"])) for o in t["obs"]),
            )
            for t in d["tracks"]
        ]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed tracks: {exc}") from exc


def save_tracks(tracks: Sequence[FeatureTrack], path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(tracks_to_dict(tracks), f)


def load_tracks(path: str | Path) -> list[FeatureTrack]:
    with open(path) as f:
        return tracks_from_dict(json.load(f))


def truth_to_dict(truth: GroundTruth, frame_times: Sequence[float] = ()) -> dict:
    return {
        "imu_period": truth.imu_period,
        "v0": truth.v0.tolist(),
        "g0": truth.g0.tolist(),
        "R_W": truth.R_W.reshape(-1).tolist(),
        "gyro_bias": np.asarray(truth.gyro_bias).tolist(),
        "accel_bias": np.asarray(truth.accel_bias).tolist(),
        "frame_times": list(map(float, frame_times)),
        "ref_R_C": truth.ref_R_C.reshape(-1).tolist(),
        "ref_p_C": truth.ref_p_C.tolist(),
        "points": {str(k): np.asarray(v).tolist() for k, v in truth.points.items()},
        "depths": [[k[0], k[1], v] for k, v in truth.depths.items()],
        "poses": {
            "t": truth.times.tolist(),
            "R": truth.R.reshape(len(truth.times), 9).tolist(),
            "p": truth.p.tolist(),
            "v": truth.v.tolist(),
        },
        "imu_clean": {"gyro": truth.gyro.tolist(), "accel": truth.accel.tolist()},
    }


def truth_from_dict(d: dict) -> GroundTruth:
    K = len(d["poses"]["t"])
    return GroundTruth(
        times=np.asarray(d["poses"]["t"], dtype=float),
        R=np.asarray(d["poses"]["R"], dtype=float).reshape(K, 3, 3),
        p=np.asarray(d["poses"]["p"], dtype=float),
        v=np.asarray(d["poses"]["v"], dtype=float),
        gyro=np.asarray(d["imu_clean"]["gyro"], dtype=float),
        accel=np.asarray(d["imu_clean"]["accel"], dtype=float),
        g0=np.asarray(d["g0"], dtype=float),
        R_W=np.asarray(d["R_W"], dtype=float).reshape(3, 3),
        imu_period=float(d["imu_period"]),
        gyro_bias=np.asarray(d["gyro_bias"], dtype=float),
        accel_bias=np.asarray(d["accel_bias"], dtype=float),
        points={int(k): np.asarray(v, dtype=float) for k, v in d["points"].items()},
        depths={(int(a), int(b)): float(v) for a, b, v in d["depths"]},
        ref_R_C=np.asarray(d["ref_R_C"], dtype=float).reshape(3, 3),
        ref_p_C=np.asarray(d["ref_p_C"], dtype=float),
    )


def save_window(window: SimWindow, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_imu_csv(window.imu, d / IMU_FILE)
    save_tracks(window.tracks, d / TRACKS_FILE)
    save_calibration(window.calib, d / CALIB_FILE)
    with open(d / TRUTH_FILE, "w") as f:
        json.dump(truth_to_dict(window.truth, window.frame_times), f)
    return d


def load_window(directory: str | Path) -> tuple[list[FeatureTrack], ImuWindow, RigCalibration, GroundTruth | None]:
    """
    Read a window directory.

    Raises
    ------
    DataError
        If a required file is missing or malformed.
    """
    d = Path(directory)
    for name in (IMU_FILE, TRACKS_FILE, CALIB_FILE):
        if not (d / name).is_file():
            raise DataError(f"missing {name} in {d}")
    try:
        calib = load_calibration(d / CALIB_FILE)
        imu = load_imu_csv(d / IMU_FILE, calib.imu_period)
        tracks = load_tracks(d / TRACKS_FILE)
        truth = None
        if (d / TRUTH_FILE).is_file():
            with open(d / TRUTH_FILE) as f:
                truth = truth_from_dict(json.load(f))
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(str(exc)) from exc
    return tracks, imu, calib, truth


def save_trace(trace: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return v
