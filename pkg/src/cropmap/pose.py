"""Rig pose estimation from IMU and RTK-GNSS streams.

Frames: the local working frame is UTM grid east/north/up translated to a
:class:`~cropmap.geodesy.LocalFrame` origin. The body frame is x-forward,
y-left, z-up and attitude uses the ZYX (yaw, pitch, roll) Euler sequence,
so ``yaw`` is measured counter-clockwise from grid east. GNSS course is
reported the navigation way (clockwise from grid north) and converted with
:func:`yaw_from_heading` before it enters the filter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DomainError, PreconditionError
from .geodesy import GeoPoint, LocalFrame, geographic_to_local

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = a - TWO_PI * np.ceil((a - math.pi) / TWO_PI)
    if out.ndim == 0:
        return float(out)
    return out


def yaw_from_heading(heading):
    """Grid heading (0 = north, clockwise) to ENU yaw (0 = east, counter-clockwise)."""
    return wrap_angle(math.pi / 2.0 - np.asarray(heading, dtype=float))


def heading_from_yaw(yaw):
    return wrap_angle(math.pi / 2.0 - np.asarray(yaw, dtype=float))


# ---------------------------------------------------------------------------
# rigid transforms


def rotation_zyx(roll, pitch, yaw):
    """Rotation matrices ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``; broadcasts to (..., 3, 3)."""
    roll, pitch, yaw = np.broadcast_arrays(
        np.asarray(roll, float), np.asarray(pitch, float), np.asarray(yaw, float)
    )
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    r = np.empty(roll.shape + (3, 3))
    r[..., 0, 0] = cy * cp
    r[..., 0, 1] = cy * sp * sr - sy * cr
    r[..., 0, 2] = cy * sp * cr + sy * sr
    r[..., 1, 0] = sy * cp
    r[..., 1, 1] = sy * sp * sr + cy * cr
    r[..., 1, 2] = sy * sp * cr - cy * sr
    r[..., 2, 0] = -sp
    r[..., 2, 1] = cp * sr
    r[..., 2, 2] = cp * cr
    return r


@dataclass(frozen=True)
class RigidTransform:
    """``p_out = rotation @ p_in + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise DomainError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_euler(cls, roll=0.0, pitch=0.0, yaw=0.0, translation=(0.0, 0.0, 0.0)):
        return cls(rotation_zyx(roll, pitch, yaw), translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class RigConfig:
    """Sensor rig geometry.

    ``lever_arm`` (L_a) is the forward distance from the base frame (RTK
    antenna centre) back to the front-wheel centre; ``sensor_mount`` maps
    LiDAR-frame points into the base frame.
    """

    lever_arm: float
    sensor_mount: RigidTransform = field(default_factory=RigidTransform)
    antenna_height: float = 2.2

    def __post_init__(self):
        if not self.lever_arm > 0:
            raise DomainError("lever arm L_a must be positive")


def default_mount(pitch_deg: float = 90.0, offset=(0.0, 0.0, -0.2)) -> RigidTransform:
    """Downward-looking mount: spin axis pitched forward so the scan fan sweeps the ground."""
    return RigidTransform.from_euler(0.0, math.radians(pitch_deg), 0.0, offset)


# ---------------------------------------------------------------------------
# poses


@dataclass(frozen=True)
class Pose:
    t: float
    position: np.ndarray
    roll: float
    pitch: float
    yaw: float
    degraded: bool = False


@dataclass
class PoseTrack:
    """Time-ordered poses stored column-wise."""

    t: np.ndarray
    position: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray
    yaw: np.ndarray
    frame: LocalFrame | None = None
    degraded: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.position = np.asarray(self.position, dtype=float).reshape(-1, 3)
        self.roll = np.asarray(self.roll, dtype=float)
        self.pitch = np.asarray(self.pitch, dtype=float)
        self.yaw = wrap_angle(np.asarray(self.yaw, dtype=float))
        if self.degraded is None:
            self.degraded = np.zeros(self.t.shape, dtype=bool)
        n = self.t.size
        if not all(a.shape[0] == n for a in (self.position, self.roll, self.pitch, self.yaw, self.degraded)):
            raise DomainError("pose track columns differ in length")
        if n == 0:
            raise DomainError("pose track is empty")
        if np.any(np.diff(self.t) <= 0):
            raise DomainError("pose timestamps must strictly increase")

    def __len__(self):
        return self.t.size

    def __getitem__(self, i) -> Pose:
        return Pose(float(self.t[i]), self.position[i].copy(), float(self.roll[i]),
                    float(self.pitch[i]), float(self.yaw[i]), bool(self.degraded[i]))

    @property
    def span(self):
        return float(self.t[0]), float(self.t[-1])


def _lerp_angle(a0, a1, w):
    return wrap_angle(a0 + w * wrap_angle(a1 - a0))


def interpolate_poses(track: PoseTrack, times):
    """Vectorised pose lookup.

    Returns ``(position (n,3), roll, pitch, yaw, degraded)``. Raises if any
    time lies outside the track; callers mask beforehand.
    """
    times = np.asarray(times, dtype=float)
    t0, t1 = track.span
    if np.any(times < t0) or np.any(times > t1):
        raise DomainError(f"time outside pose track span [{t0}, {t1}]")
    n = len(track)
    if n == 1:
        k = np.zeros(times.shape, dtype=int)
        return (track.position[k], track.roll[k], track.pitch[k], track.yaw[k], track.degraded[k])
    hi = np.clip(np.searchsorted(track.t, times, side="right"), 1, n - 1)
    lo = hi - 1
    w = (times - track.t[lo]) / (track.t[hi] - track.t[lo])
    # exact sample hits reproduce the stored pose bit for bit
    exact = times == track.t[hi]
    lo = np.where(exact, hi, lo)
    w = np.where(exact, 0.0, w)
    pos = track.position[lo] + w[..., None] * (track.position[hi] - track.position[lo])
    roll = _lerp_angle(track.roll[lo], track.roll[hi], w)
    pitch = _lerp_angle(track.pitch[lo], track.pitch[hi], w)
    yaw = _lerp_angle(track.yaw[lo], track.yaw[hi], w)
    degraded = track.degraded[lo] | (track.degraded[hi] & (w > 0))
    return pos, roll, pitch, yaw, degraded


def interpolate_pose(track: PoseTrack, t: float) -> Pose:
    """Pose at time ``t``: linear in position, shortest arc in each angle."""
    t0, t1 = track.span
    if not t0 <= t <= t1:
        raise DomainError(f"t={t} outside pose track span [{t0}, {t1}]")
    pos, roll, pitch, yaw, deg = interpolate_poses(track, np.array([t]))
    return Pose(float(t), pos[0], float(roll[0]), float(pitch[0]), float(yaw[0]), bool(deg[0]))


def world_from_base(p: Pose) -> RigidTransform:
    return RigidTransform(rotation_zyx(p.roll, p.pitch, p.yaw), p.position)


def base_to_sensor(p: Pose, rig: RigConfig) -> RigidTransform:
    """World-from-LiDAR transform for a base-frame pose."""
    return world_from_base(p).compose(rig.sensor_mount)


def front_wheel_position(p: Pose, rig: RigConfig) -> np.ndarray:
    """Ground point below the front axle centre, L_a behind the base frame."""
    r = rotation_zyx(p.roll, p.pitch, p.yaw)
    return p.position + r @ np.array([-rig.lever_arm, 0.0, -rig.antenna_height])


# ---------------------------------------------------------------------------
# sensor streams


class FixQuality(str, Enum):
    RTK_FIXED = "fixed"
    RTK_FLOAT = "float"
    STANDALONE = "standalone"


@dataclass(frozen=True)
class ImuSample:
    t: float
    roll: float
    pitch: float
    yaw_rate: float


@dataclass(frozen=True)
class GnssFix:
    t: float
    position: GeoPoint
    quality: FixQuality = FixQuality.RTK_FIXED


@dataclass
class ImuStream:
    t: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray
    yaw_rate: np.ndarray

    def __post_init__(self):
        for name in ("t", "roll", "pitch", "yaw_rate"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(np.diff(self.t) <= 0):
            raise DomainError("IMU timestamps must strictly increase")

    def __len__(self):
        return self.t.size

    @classmethod
    def from_samples(cls, samples):
        a = np.array([(s.t, s.roll, s.pitch, s.yaw_rate) for s in samples], dtype=float).reshape(-1, 4)
        return cls(a[:, 0], a[:, 1], a[:, 2], a[:, 3])


@dataclass
class GnssStream:
    t: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    alt: np.ndarray
    quality: np.ndarray  # array of FixQuality values (str)

    def __post_init__(self):
        for name in ("t", "lat", "lon", "alt"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.quality = np.asarray([FixQuality(q).value for q in self.quality], dtype=object)
        if np.any(np.diff(self.t) <= 0):
            raise DomainError("GNSS timestamps must strictly increase")

    def __len__(self):
        return self.t.size

    @classmethod
    def from_fixes(cls, fixes):
        fixes = list(fixes)
        return cls(
            [f.t for f in fixes],
            [f.position.latitude for f in fixes],
            [f.position.longitude for f in fixes],
            [f.position.altitude for f in fixes],
            [FixQuality(f.quality).value for f in fixes],
        )

    def subset(self, mask):
        return GnssStream(self.t[mask], self.lat[mask], self.lon[mask], self.alt[mask], self.quality[mask])


# ---------------------------------------------------------------------------
# course over ground


@dataclass(frozen=True)
class Course:
    heading: float  # rad, clockwise from grid north
    speed: float
    reliable: bool = True


def course_from_local(p0, p1, dt: float, min_speed: float = 0.3) -> Course:
    if not dt > 0:
        raise DomainError("course needs strictly increasing fix times")
    de, dn = float(p1[0] - p0[0]), float(p1[1] - p0[1])
    speed = math.hypot(de, dn) / dt
    return Course(math.atan2(de, dn), speed, speed >= min_speed)


def gnss_course(prev: GnssFix, nxt: GnssFix, frame: LocalFrame, min_speed: float = 0.3) -> Course:
    """Course over ground between two fixes, measured on the UTM grid."""
    dt = nxt.t - prev.t
    if not dt > 0:
        raise DomainError("course needs strictly increasing fix times")
    pts = geographic_to_local(
        [prev.position.latitude, nxt.position.latitude],
        [prev.position.longitude, nxt.position.longitude],
        [prev.position.altitude, nxt.position.altitude],
        frame,
    )
    return course_from_local(pts[0], pts[1], dt, min_speed)


# ---------------------------------------------------------------------------
# heading EKF, state [yaw, gyro_bias]


@dataclass(frozen=True)
class ProcessNoise:
    gyro_noise: float = math.radians(0.1)  # rad/s/sqrt(Hz)
    bias_walk: float = math.radians(0.01)  # rad/s/sqrt(s)


@dataclass(frozen=True)
class HeadingEkfState:
    yaw: float
    gyro_bias: float
    covariance: np.ndarray

    def __post_init__(self):
        p = np.array(self.covariance, dtype=float).reshape(2, 2)
        if not np.allclose(p, p.T, rtol=0, atol=1e-15 * max(1.0, np.abs(p).max())):
            raise DomainError("covariance is not symmetric")
        if np.any(np.linalg.eigvalsh(p) <= 0):
            raise DomainError("covariance is not positive definite")
        p.setflags(write=False)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        object.__setattr__(self, "covariance", p)


def _predict_arrays(yaw, bias, p, yaw_rate, dt, q_yaw, q_bias):
    """Broadcasting predict on ``p`` of shape (..., 2, 2)."""
    yaw = wrap_angle(yaw + (yaw_rate - bias) * dt)
    p00, p01, p11 = p[..., 0, 0], p[..., 0, 1], p[..., 1, 1]
    # F = [[1, -dt], [0, 1]]
    n00 = p00 - 2.0 * dt * p01 + dt * dt * p11 + q_yaw * dt
    n01 = p01 - dt * p11
    n11 = p11 + q_bias * dt
    out = np.empty_like(p)
    out[..., 0, 0] = n00
    out[..., 0, 1] = n01
    out[..., 1, 0] = n01
    out[..., 1, 1] = n11
    return yaw, bias, out


def _update_arrays(yaw, bias, p, measured, r):
    """Scalar-measurement update (H = [1, 0]) in Joseph form."""
    innov = wrap_angle(measured - yaw)
    p00, p01, p11 = p[..., 0, 0], p[..., 0, 1], p[..., 1, 1]
    s = p00 + r
    k0, k1 = p00 / s, p01 / s
    yaw = wrap_angle(yaw + k0 * innov)
    bias = bias + k1 * innov
    # (I-KH) P (I-KH)^T + K r K^T, written out for the 2x2 case
    a00, a10 = 1.0 - k0, -k1
    n00 = a00 * a00 * p00 + k0 * k0 * r
    n01 = a00 * (a10 * p00 + p01) + k0 * k1 * r
    n11 = a10 * a10 * p00 + 2.0 * a10 * p01 + p11 + k1 * k1 * r
    out = np.empty_like(p)
    out[..., 0, 0] = n00
    out[..., 0, 1] = n01
    out[..., 1, 0] = n01
    out[..., 1, 1] = n11
    return yaw, bias, out, innov


def ekf_predict(s: HeadingEkfState, yaw_rate: float, dt: float, q: ProcessNoise = ProcessNoise()) -> HeadingEkfState:
    if not dt > 0:
        raise DomainError("predict step needs dt > 0")
    yaw, bias, p = _predict_arrays(s.yaw, s.gyro_bias, np.array(s.covariance), yaw_rate, dt,
                                   q.gyro_noise**2, q.bias_walk**2)
    return HeadingEkfState(float(yaw), float(bias), p)


def ekf_update(s: HeadingEkfState, measured_yaw: float, r: float) -> HeadingEkfState:
    """Fuse one absolute yaw observation with variance ``r`` (rad^2)."""
    if not r > 0:
        raise DomainError("measurement variance must be positive")
    yaw, bias, p, _ = _update_arrays(s.yaw, s.gyro_bias, np.array(s.covariance), measured_yaw, r)
    return HeadingEkfState(float(yaw), float(bias), p)


# ---------------------------------------------------------------------------
# track estimation


@dataclass(frozen=True)
class FusionConfig:
    process: ProcessNoise = ProcessNoise()
    gnss_sigma: float = 0.015  # horizontal fix noise, m
    course_baseline: float = 0.5  # s between the two fixes forming a course
    course_var_floor: float = math.radians(0.5) ** 2
    min_speed: float = 0.3
    max_gap: float = 0.5
    init_yaw_sigma: float = math.radians(10.0)
    init_bias_sigma: float = math.radians(1.0)
    accept_quality: tuple = (FixQuality.RTK_FIXED.value, FixQuality.RTK_FLOAT.value)


@dataclass
class TrackReport:
    n_poses: int = 0
    n_degraded: int = 0
    n_course_updates: int = 0
    n_course_unreliable: int = 0
    n_fixes_used: int = 0
    n_fixes_rejected: int = 0
    final_bias: float = 0.0
    final_covariance: np.ndarray | None = None


def course_observations(t, xy, cfg: FusionConfig):
    """Course measurements from fix pairs ``baseline`` apart.

    The chord between two points on a constant-curvature path is parallel
    to the tangent at its midpoint, so each observation is stamped at the
    pair's mid time. Returns ``(time, yaw, variance, reliable)`` arrays.
    """
    n = t.size
    if n < 2:
        return (np.empty(0),) * 3 + (np.empty(0, bool),)
    period = np.median(np.diff(t))
    m = max(1, int(round(cfg.course_baseline / period)))
    m = min(m, n - 1)
    i0 = np.arange(n - m)
    i1 = i0 + m
    dt = t[i1] - t[i0]
    # a pair spanning an outage is not a course over a known path
    gaps = np.diff(t)
    csum = np.concatenate([[0.0], np.cumsum(gaps > cfg.max_gap)])
    intact = (csum[i1] - csum[i0]) == 0
    d = xy[i1] - xy[i0]
    dist = np.hypot(d[:, 0], d[:, 1])
    speed = dist / dt
    heading = np.arctan2(d[:, 0], d[:, 1])
    sigma_v = math.sqrt(2.0) * cfg.gnss_sigma / dt
    with np.errstate(divide="ignore"):
        var = np.maximum(sigma_v**2 / np.maximum(speed, 1e-12) ** 2, cfg.course_var_floor)
    reliable = (speed >= cfg.min_speed) & intact
    tm = 0.5 * (t[i0] + t[i1])
    return tm, yaw_from_heading(heading), var, reliable


def estimate_track(imu: ImuStream, gnss: GnssStream, rig: RigConfig, frame: LocalFrame,
                   cfg: FusionConfig = FusionConfig(), report: TrackReport | None = None) -> PoseTrack:
    """Fuse IMU and GNSS into a pose track with one pose per IMU sample.

    Position is interpolated linearly between fixes (the base frame sits at
    the antenna). Roll and pitch are taken from the IMU. Yaw comes from a
    two-state EKF driven by the gyro and corrected with GNSS course.
    """
    if report is None:
        report = TrackReport()
    if len(imu) == 0 or len(gnss) == 0:
        raise PreconditionError("IMU and GNSS streams must both be non-empty")
    keep = np.isin(gnss.quality, list(cfg.accept_quality))
    report.n_fixes_rejected = int((~keep).sum())
    gnss = gnss.subset(keep)
    report.n_fixes_used = len(gnss)
    if len(gnss) == 0:
        raise PreconditionError("no GNSS fix of acceptable quality")
    t_lo = max(imu.t[0], gnss.t[0])
    t_hi = min(imu.t[-1], gnss.t[-1])
    sel = (imu.t >= t_lo) & (imu.t <= t_hi)
    if t_hi < t_lo or not sel.any():
        raise PreconditionError("IMU and GNSS streams do not overlap in time")

    xyz = geographic_to_local(gnss.lat, gnss.lon, gnss.alt, frame)
    tp = imu.t[sel]
    pos = np.column_stack([np.interp(tp, gnss.t, xyz[:, k]) for k in range(3)])
    hi = np.clip(np.searchsorted(gnss.t, tp, side="left"), 1, max(len(gnss) - 1, 1))
    if len(gnss) > 1:
        bracket = gnss.t[hi] - gnss.t[hi - 1]
        degraded = (bracket > cfg.max_gap) & (tp != gnss.t[hi]) & (tp != gnss.t[hi - 1])
    else:
        degraded = np.zeros(tp.shape, bool)

    ot, oyaw, ovar, orel = course_observations(gnss.t, xyz[:, :2], cfg)
    report.n_course_unreliable = int((~orel).sum())
    ot, oyaw, ovar = ot[orel], oyaw[orel], ovar[orel]

    yaw_out = _run_heading_filter(imu.t[sel], imu.yaw_rate[sel], ot, oyaw, ovar, cfg, report)
    report.n_poses = int(tp.size)
    report.n_degraded = int(degraded.sum())
    return PoseTrack(tp, pos, imu.roll[sel], imu.pitch[sel], yaw_out, frame, degraded)


def _run_heading_filter(t, rate, ot, oyaw, ovar, cfg: FusionConfig, report: TrackReport):
    q_yaw = cfg.process.gyro_noise**2
    q_bias = cfg.process.bias_walk**2
    if ot.size:
        yaw = float(oyaw[0])
        p_yaw = max(cfg.init_yaw_sigma**2, float(ovar[0]))
    else:
        yaw, p_yaw = 0.0, math.pi**2
    bias = 0.0
    p = np.array([[p_yaw, 0.0], [0.0, cfg.init_bias_sigma**2]])
    out = np.empty(t.size)
    j = int(np.searchsorted(ot, t[0], side="left"))
    # observations older than the first IMU sample only seed the state
    out[0] = yaw
    cur = t[0]
    for k in range(1, t.size):
        w = rate[k - 1]
        while j < ot.size and ot[j] <= t[k]:
            if ot[j] > cur:
                yaw, bias, p = _predict_arrays(yaw, bias, p, w, ot[j] - cur, q_yaw, q_bias)
                cur = ot[j]
            yaw, bias, p, _ = _update_arrays(yaw, bias, p, oyaw[j], ovar[j])
            report.n_course_updates += 1
            j += 1
        if t[k] > cur:
            yaw, bias, p = _predict_arrays(yaw, bias, p, w, t[k] - cur, q_yaw, q_bias)
            cur = t[k]
        out[k] = yaw
    report.final_bias = float(bias)
    report.final_covariance = p.copy()
    return out
