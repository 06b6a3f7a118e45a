"""16-beam spinning LiDAR model and scan projection into the local frame."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError
from .pose import PoseTrack, RigConfig, interpolate_poses, rotation_zyx


def _default_elevations():
    return tuple(math.radians(-15.0 + 2.0 * k) for k in range(16))


@dataclass(frozen=True)
class LidarSpec:
    channel_elevations: tuple = field(default_factory=_default_elevations)
    azimuth_step: float = math.radians(0.2)
    range_sigma: float = 0.03
    min_range: float = 0.5
    max_range: float = 100.0
    sweep_period: float = 0.1

    def __post_init__(self):
        el = np.asarray(self.channel_elevations, dtype=float)
        object.__setattr__(self, "channel_elevations", tuple(float(v) for v in el))
        if el.size == 0 or np.any(np.diff(el) <= 0):
            raise DomainError("channel elevations must be strictly increasing")
        if not 0 < self.min_range < self.max_range:
            raise DomainError("need 0 < min_range < max_range")
        if not self.azimuth_step > 0:
            raise DomainError("azimuth_step must be positive")
        if not self.sweep_period > 0:
            raise DomainError("sweep_period must be positive")
        if self.range_sigma < 0:
            raise DomainError("range_sigma must be non-negative")

    @property
    def n_channels(self) -> int:
        return len(self.channel_elevations)

    @property
    def azimuths_per_sweep(self) -> int:
        return int(round(2.0 * math.pi / self.azimuth_step))


class RawReturn(NamedTuple):
    t: float
    channel: int
    azimuth: float
    range: float


@dataclass
class Scan:
    """One sweep, stored column-wise in firing order."""

    sweep_start: float
    t: np.ndarray
    channel: np.ndarray
    azimuth: np.ndarray
    range: np.ndarray

    def __post_init__(self):
        self.sweep_start = float(self.sweep_start)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.channel = np.asarray(self.channel, dtype=np.uint8)
        self.azimuth = np.asarray(self.azimuth, dtype=np.float32)
        self.range = np.asarray(self.range, dtype=np.float32)
        n = self.t.size
        if not (self.channel.size == self.azimuth.size == self.range.size == n):
            raise DomainError("scan columns differ in length")

    def __len__(self):
        return self.t.size

    def returns(self):
        for i in range(len(self)):
            yield RawReturn(float(self.t[i]), int(self.channel[i]), float(self.azimuth[i]), float(self.range[i]))

    def validate(self, spec: LidarSpec, tol: float = 1e-6):
        if len(self) == 0:
            return
        if np.any(self.t < self.sweep_start - tol) or np.any(self.t > self.sweep_start + spec.sweep_period + tol):
            raise DomainError(f"return time outside sweep starting at {self.sweep_start}")
        if np.any(self.channel >= spec.n_channels):
            raise DomainError("unknown channel index")
        if np.any(self.range < spec.min_range) or np.any(self.range > spec.max_range):
            raise DomainError("range outside sensor limits")

    @classmethod
    def empty(cls, sweep_start=0.0):
        return cls(sweep_start, [], [], [], [])


def beam_directions(channel, azimuth, spec: LidarSpec) -> np.ndarray:
    """Unit beam vectors in the sensor frame, shape (n, 3).

    x-forward, z along the spin axis, azimuth clockwise from +x seen from +z.
    """
    channel = np.asarray(channel)
    if np.any(channel >= spec.n_channels) or np.any(channel < 0):
        raise DomainError("unknown channel index")
    el = np.asarray(spec.channel_elevations)[channel.astype(int)]
    az = np.asarray(azimuth, dtype=float)
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), -ce * np.sin(az), np.sin(el)], axis=-1)


def spherical_to_cartesian(r: RawReturn, spec: LidarSpec) -> np.ndarray:
    if not 0 <= r.channel < spec.n_channels:
        raise DomainError(f"unknown channel {r.channel}")
    return float(r.range) * beam_directions(np.array([r.channel]), np.array([r.azimuth]), spec)[0]


def returns_to_sensor_xyz(scan: Scan, spec: LidarSpec) -> np.ndarray:
    return beam_directions(scan.channel, scan.azimuth, spec) * scan.range.astype(float)[:, None]


@dataclass
class ProjectionResult:
    points: np.ndarray
    n_outside: int = 0
    n_degraded: int = 0

    @property
    def rejected(self) -> bool:
        return self.points.shape[0] == 0 and self.n_outside > 0


def world_from_sensor(track: PoseTrack, rig: RigConfig, times):
    """Rotation (n,3,3) and translation (n,3) of the LiDAR frame at each time."""
    pos, roll, pitch, yaw, degraded = interpolate_poses(track, times)
    r_wb = rotation_zyx(roll, pitch, yaw)
    m = rig.sensor_mount
    rot = r_wb @ m.rotation
    trans = np.einsum("nij,j->ni", r_wb, m.translation) + pos
    return rot, trans, degraded


def project_scan(s: Scan, track: PoseTrack, rig: RigConfig, spec: LidarSpec,
                 exclude_degraded: bool = True) -> ProjectionResult:
    """Project every return through the pose at its own timestamp.

    Per-return lookup removes the motion smear within a sweep. Returns
    outside the track span and, by default, returns whose pose is flagged
    degraded are dropped and counted.
    """
    if len(s) == 0:
        return ProjectionResult(np.empty((0, 3)))
    t0, t1 = track.span
    inside = (s.t >= t0) & (s.t <= t1)
    n_outside = int((~inside).sum())
    if not inside.any():
        return ProjectionResult(np.empty((0, 3)), n_outside=n_outside)
    rot, trans, degraded = world_from_sensor(track, rig, s.t[inside])
    local = beam_directions(s.channel[inside], s.azimuth[inside], spec) * s.range[inside].astype(float)[:, None]
    pts = np.einsum("nij,nj->ni", rot, local) + trans
    n_degraded = 0
    if exclude_degraded and degraded.any():
        n_degraded = int(degraded.sum())
        pts = pts[~degraded]
    return ProjectionResult(pts, n_outside=n_outside, n_degraded=n_degraded)
