"""Synthetic experimental field, vehicle drive, and sensor streams.

The simulator is the source of ground truth for the rest of the pipeline:
every parcel's canopy volume is known in closed form, the vehicle path is
analytic, and every LiDAR return comes from ray casting a heightfield.

Layout conventions (local frame, metres): parcels are ``parcel_length``
long along x and ``parcel_width`` wide along y; crop rows run along x.
Parcel (row r, col c) has its south-west corner at
``(c * (length + gap_x), r * (width + gap_y))``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .biomass import REFERENCE_LINEAR, PolyModel, predict
from .errors import DomainError
from .geodesy import GeoPoint, LocalFrame, UtmCoord, local_to_geographic, wgs84_to_utm
from .lidar import LidarSpec, Scan, beam_directions
from .pose import (
    FixQuality,
    GnssStream,
    ImuStream,
    Pose,
    PoseTrack,
    RigConfig,
    rotation_zyx,
    wrap_angle,
)

# field reference point, zone 32
FIELD_REFERENCE = GeoPoint(55.32729, 11.38846, 45.0)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def default_origin() -> UtmCoord:
    return wgs84_to_utm(FIELD_REFERENCE, forced_zone=32)


# ---------------------------------------------------------------------------
# field geometry


@dataclass(frozen=True)
class FieldSpec:
    parcel_rows: int = 4
    parcel_cols: int = 21
    parcel_length: float = 8.0
    parcel_width: float = 2.28
    crop_row_spacing: float = 0.12
    crop_rows_per_parcel: int = 19
    stripe_width: float = 0.12
    gap_x: float = 1.0
    gap_y: float = 1.0
    canopy_heights: tuple | None = None  # row-major, one per parcel
    height_range: tuple = (0.35, 0.62)
    # z = c0 + cx*x + cy*y + cxx*x^2 + cxy*x*y + cyy*y^2
    soil_coeffs: tuple = (0.0, 0.008, -0.004, 2e-5, 0.0, -1e-5)
    margin: float = 6.0
    origin: UtmCoord = field(default_factory=default_origin)

    def __post_init__(self):
        if self.parcel_rows < 1 or self.parcel_cols < 1:
            raise DomainError("field needs at least one parcel")
        for name in ("parcel_length", "parcel_width", "crop_row_spacing", "stripe_width"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.gap_x < 0 or self.gap_y < 0 or self.margin < 0:
            raise DomainError("gaps and margin must be non-negative")
        if self.crop_rows_per_parcel < 1:
            raise DomainError("need at least one crop row")
        if self.crop_rows_per_parcel * self.crop_row_spacing > self.parcel_width + 1e-9:
            raise DomainError("crop rows do not fit inside the parcel width")
        if self.stripe_width > self.crop_row_spacing + 1e-12:
            raise DomainError("stripe width cannot exceed row spacing")
        if self.canopy_heights is not None:
            h = tuple(float(v) for v in self.canopy_heights)
            if len(h) != self.n_parcels:
                raise DomainError(f"expected {self.n_parcels} canopy heights, got {len(h)}")
            if any(v < 0 for v in h):
                raise DomainError("canopy heights must be >= 0")
            object.__setattr__(self, "canopy_heights", h)
        if len(self.soil_coeffs) != 6:
            raise DomainError("soil polynomial needs 6 coefficients")

    @property
    def n_parcels(self) -> int:
        return self.parcel_rows * self.parcel_cols

    @property
    def extent(self):
        """(x_max, y_max) of the parcel block; the block starts at the origin."""
        w = self.parcel_cols * self.parcel_length + (self.parcel_cols - 1) * self.gap_x
        h = self.parcel_rows * self.parcel_width + (self.parcel_rows - 1) * self.gap_y
        return w, h

    @property
    def row_offset(self) -> float:
        return 0.5 * (self.parcel_width - self.crop_rows_per_parcel * self.crop_row_spacing)

    @property
    def coverage(self) -> float:
        """Fraction of a parcel footprint under canopy stripes."""
        return self.crop_rows_per_parcel * self.stripe_width / self.parcel_width

    def frame(self) -> LocalFrame:
        return LocalFrame(self.origin, "simulated field")


@dataclass(frozen=True)
class Parcel:
    id: str
    row: int
    col: int
    x0: float
    y0: float
    x1: float
    y1: float
    height: float

    @property
    def footprint(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def corners(self) -> np.ndarray:
        return np.array([[self.x0, self.y0], [self.x1, self.y0], [self.x1, self.y1], [self.x0, self.y1]])


def parcel_id(row: int, col: int) -> str:
    return f"P{row + 1}-{col + 1:02d}"


def canopy_heights(f: FieldSpec, seed: int = 0) -> np.ndarray:
    if f.canopy_heights is not None:
        return np.asarray(f.canopy_heights, dtype=float)
    lo, hi = f.height_range
    return _rng(seed, 1).uniform(lo, hi, f.n_parcels)


def parcels(f: FieldSpec, seed: int = 0) -> list[Parcel]:
    h = canopy_heights(f, seed)
    out = []
    for r in range(f.parcel_rows):
        for c in range(f.parcel_cols):
            x0 = c * (f.parcel_length + f.gap_x)
            y0 = r * (f.parcel_width + f.gap_y)
            out.append(Parcel(parcel_id(r, c), r, c, x0, y0, x0 + f.parcel_length, y0 + f.parcel_width,
                              float(h[r * f.parcel_cols + c])))
    return out


def soil_height(f: FieldSpec, x, y):
    c0, cx, cy, cxx, cxy, cyy = f.soil_coeffs
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return c0 + cx * x + cy * y + cxx * x * x + cxy * x * y + cyy * y * y


def soil_gradient(f: FieldSpec, x, y):
    _, cx, cy, cxx, cxy, cyy = f.soil_coeffs
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return cx + 2 * cxx * x + cxy * y, cy + cxy * x + 2 * cyy * y


def _interval_overlap(a0, a1, b0, b1):
    return max(0.0, min(a1, b1) - max(a0, b0))


def canopy_volume_in_rect(f: FieldSpec, p: Parcel, x0, y0, x1, y1) -> float:
    """Exact canopy volume of parcel ``p`` inside an axis-aligned rectangle."""
    ox = _interval_overlap(p.x0, p.x1, x0, x1)
    if ox == 0.0 or p.height == 0.0:
        return 0.0
    half = 0.5 * f.stripe_width
    base = p.y0 + f.row_offset
    total = 0.0
    for k in range(f.crop_rows_per_parcel):
        yc = base + (k + 0.5) * f.crop_row_spacing
        total += _interval_overlap(yc - half, yc + half, y0, y1)
    return p.height * ox * total


@dataclass(frozen=True)
class ParcelTruth:
    id: str
    height: float
    footprint: float
    volume: float
    e_v: float
    corners: tuple  # four GeoPoints, counter-clockwise from south-west


def ground_truth(f: FieldSpec, seed: int = 0) -> list[ParcelTruth]:
    """Analytic canopy volume and volume density (m^3/ha) per parcel."""
    frame = f.frame()
    out = []
    for p in parcels(f, seed):
        vol = canopy_volume_in_rect(f, p, p.x0, p.y0, p.x1, p.y1)
        c = p.corners
        lat, lon, alt = local_to_geographic(np.column_stack([c, np.zeros(4)]), frame)
        geo = tuple(GeoPoint(float(a), float(b), float(z)) for a, b, z in zip(lat, lon, alt))
        out.append(ParcelTruth(p.id, p.height, p.footprint, vol, vol / p.footprint * 1e4, geo))
    return out


# ---------------------------------------------------------------------------
# heightfield


@dataclass
class Heightfield:
    """Surface and soil rasters; cell (iy, ix) spans ``[x0 + ix*cell, x0 + (ix+1)*cell)``."""

    x0: float
    y0: float
    cell: float
    surface: np.ndarray
    soil: np.ndarray
    label: np.ndarray  # True = plant

    @property
    def shape(self):
        return self.surface.shape

    def cell_index(self, x, y):
        ix = np.floor((np.asarray(x) - self.x0) / self.cell).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.y0) / self.cell).astype(np.int64)
        return iy, ix

    def lookup(self, raster, x, y):
        iy, ix = self.cell_index(x, y)
        ny, nx = raster.shape
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        out = np.full(np.shape(ix), np.nan)
        out[ok] = raster[iy[ok], ix[ok]]
        return out

    def surface_at(self, x, y):
        return self.lookup(self.surface, x, y)

    def canopy_volume(self, x0, y0, x1, y1) -> float:
        """Raster volume of (surface - soil) over cells whose centres fall in the rectangle."""
        ny, nx = self.shape
        xc = self.x0 + (np.arange(nx) + 0.5) * self.cell
        yc = self.y0 + (np.arange(ny) + 0.5) * self.cell
        mx = (xc >= x0) & (xc < x1)
        my = (yc >= y0) & (yc < y1)
        d = (self.surface - self.soil)[np.ix_(my, mx)]
        return float(d.sum() * self.cell**2)


def build_heightfield(f: FieldSpec, cell: float = 0.04, seed: int = 0) -> Heightfield:
    if not 0 < cell <= f.crop_row_spacing / 2 + 1e-12:
        raise DomainError(f"cell {cell} too coarse to resolve rows spaced {f.crop_row_spacing}")
    w, h = f.extent
    x0 = math.floor(-f.margin / cell) * cell
    y0 = math.floor(-f.margin / cell) * cell
    nx = int(math.ceil((w + f.margin - x0) / cell))
    ny = int(math.ceil((h + f.margin - y0) / cell))
    xc = x0 + (np.arange(nx) + 0.5) * cell
    yc = y0 + (np.arange(ny) + 0.5) * cell
    soil = soil_height(f, xc[None, :], yc[:, None])
    canopy = np.zeros((ny, nx))
    frac_lo = 0.5 - 0.5 * f.stripe_width / f.crop_row_spacing
    frac_hi = 0.5 + 0.5 * f.stripe_width / f.crop_row_spacing
    for p in parcels(f, seed):
        if p.height == 0.0:
            continue
        ix = np.nonzero((xc >= p.x0) & (xc < p.x1))[0]
        u = (yc - p.y0 - f.row_offset) / f.crop_row_spacing
        k = np.floor(u)
        frac = u - k
        in_row = (k >= 0) & (k < f.crop_rows_per_parcel) & (frac >= frac_lo) & (frac < frac_hi)
        iy = np.nonzero(in_row)[0]
        if ix.size and iy.size:
            canopy[np.ix_(iy, ix)] = p.height
    surface = soil + canopy
    return Heightfield(x0, y0, cell, surface, soil, canopy > 0)


# ---------------------------------------------------------------------------
# ray casting


@njit(cache=True, nogil=True)
def _cast_rays(ox, oy, oz, dx, dy, dz, surf, x0, y0, cell, zmin, zmax, step, max_range, n_bisect,
               t_out, iy_out, ix_out):
    ny, nx = surf.shape
    xmax = x0 + nx * cell
    ymax = y0 + ny * cell
    for i in range(ox.shape[0]):
        t_out[i] = np.nan
        iy_out[i] = -1
        ix_out[i] = -1
        # clip the ray to the slab around [zmin, zmax] and to the raster footprint; the
        # slab is padded by one step so rounding never clips away a flat surface
        t_lo = 0.0
        t_hi = max_range
        if dz[i] < 0.0:
            t_lo = max(t_lo, (zmax + step - oz[i]) / dz[i])
            t_hi = min(t_hi, (zmin - step - oz[i]) / dz[i])
        elif oz[i] > zmax:
            continue
        if dx[i] != 0.0:
            a = (x0 - ox[i]) / dx[i]
            b = (xmax - ox[i]) / dx[i]
            t_lo = max(t_lo, min(a, b))
            t_hi = min(t_hi, max(a, b))
        elif ox[i] < x0 or ox[i] >= xmax:
            continue
        if dy[i] != 0.0:
            a = (y0 - oy[i]) / dy[i]
            b = (ymax - oy[i]) / dy[i]
            t_lo = max(t_lo, min(a, b))
            t_hi = min(t_hi, max(a, b))
        elif oy[i] < y0 or oy[i] >= ymax:
            continue
        if t_lo > t_hi:
            continue
        t = t_lo
        t_prev = -1.0
        hit = -1.0
        while True:
            jx = int(math.floor((ox[i] + t * dx[i] - x0) / cell))
            jy = int(math.floor((oy[i] + t * dy[i] - y0) / cell))
            if 0 <= jx < nx and 0 <= jy < ny:
                if oz[i] + t * dz[i] <= surf[jy, jx]:
                    if t_prev < 0.0:
                        hit = t
                    else:
                        a = t_prev
                        b = t
                        for _ in range(n_bisect):
                            m = 0.5 * (a + b)
                            kx = int(math.floor((ox[i] + m * dx[i] - x0) / cell))
                            ky = int(math.floor((oy[i] + m * dy[i] - y0) / cell))
                            below = False
                            if 0 <= kx < nx and 0 <= ky < ny:
                                below = oz[i] + m * dz[i] <= surf[ky, kx]
                            if below:
                                b = m
                            else:
                                a = m
                        hit = b
                        # snap onto the flat top of the hit cell when that is where the ray lands
                        kx = int(math.floor((ox[i] + b * dx[i] - x0) / cell))
                        ky = int(math.floor((oy[i] + b * dy[i] - y0) / cell))
                        if dz[i] < 0.0 and 0 <= kx < nx and 0 <= ky < ny:
                            tt = (surf[ky, kx] - oz[i]) / dz[i]
                            if a <= tt <= b:
                                sx = int(math.floor((ox[i] + tt * dx[i] - x0) / cell))
                                sy = int(math.floor((oy[i] + tt * dy[i] - y0) / cell))
                                if sx == kx and sy == ky:
                                    hit = tt
                    break
            t_prev = t
            if t >= t_hi:
                break
            t = min(t + step, t_hi)
        if hit >= 0.0:
            t_out[i] = hit
            ix_out[i] = int(math.floor((ox[i] + hit * dx[i] - x0) / cell))
            iy_out[i] = int(math.floor((oy[i] + hit * dy[i] - y0) / cell))
            if not (0 <= ix_out[i] < nx and 0 <= iy_out[i] < ny):
                t_out[i] = np.nan
                ix_out[i] = -1
                iy_out[i] = -1


@dataclass(frozen=True)
class RayCaster:
    hf: Heightfield
    step: float = 0.02
    n_bisect: int = 10

    def cast(self, origins, directions, max_range):
        """Distance to the first surface hit along unit rays; NaN for misses.

        Also returns the label of the hit cell (True = plant).
        """
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        n = o.shape[0]
        t = np.empty(n)
        iy = np.empty(n, np.int64)
        ix = np.empty(n, np.int64)
        surf = np.ascontiguousarray(self.hf.surface, dtype=np.float64)
        _cast_rays(o[:, 0].copy(), o[:, 1].copy(), o[:, 2].copy(), d[:, 0].copy(), d[:, 1].copy(),
                   d[:, 2].copy(), surf, self.hf.x0, self.hf.y0, self.hf.cell, float(surf.min()),
                   float(surf.max()), self.step, float(max_range), self.n_bisect, t, iy, ix)
        label = np.zeros(n, dtype=bool)
        ok = ix >= 0
        label[ok] = self.hf.label[iy[ok], ix[ok]]
        return t, label


@dataclass
class SweepTruth:
    """Noise-free geometry behind a simulated scan, aligned with its returns."""

    points: np.ndarray
    plant: np.ndarray


def _sweep_geometry(spec: LidarSpec, sweep_start: float):
    naz = spec.azimuths_per_sweep
    j = np.arange(naz)
    # cast along the azimuths a Scan can actually store
    az = (j * spec.azimuth_step).astype(np.float32).astype(np.float64)
    times = sweep_start + j / naz * spec.sweep_period
    ch = np.arange(spec.n_channels)
    az_grid = np.repeat(az, spec.n_channels)
    ch_grid = np.tile(ch, naz)
    t_grid = np.repeat(times, spec.n_channels)
    return times, az_grid, ch_grid, t_grid


def _cast_sweep(rot, trans, spec: LidarSpec, caster: RayCaster, sweep_start: float, rng):
    """rot/trans: world-from-sensor per azimuth step (naz, 3, 3) / (naz, 3)."""
    times, az, ch, t = _sweep_geometry(spec, sweep_start)
    d_s = beam_directions(ch, az, spec)
    nch = spec.n_channels
    rot_r = np.repeat(rot, nch, axis=0)
    d_w = np.einsum("nij,nj->ni", rot_r, d_s)
    o_w = np.repeat(trans, nch, axis=0)
    rng_true, plant = caster.cast(o_w, d_w, spec.max_range)
    hit = np.isfinite(rng_true)
    noise = rng.normal(0.0, spec.range_sigma, int(hit.sum())) if spec.range_sigma > 0 else 0.0
    r = rng_true[hit] + noise
    keep = (r >= spec.min_range) & (r <= spec.max_range)
    idx = np.nonzero(hit)[0][keep]
    scan = Scan(sweep_start, t[idx], ch[idx], az[idx], r[keep].astype(np.float32))
    truth = SweepTruth(o_w[idx] + d_w[idx] * rng_true[idx, None], plant[idx])
    return scan, truth


def simulate_scan(p: Pose, spec: LidarSpec, hf: Heightfield, rig: RigConfig, rng,
                  caster: RayCaster | None = None, with_truth: bool = False):
    """One sweep from a fixed pose; return times still advance with azimuth."""
    if caster is None:
        caster = RayCaster(hf)
    r_wb = rotation_zyx(p.roll, p.pitch, p.yaw)
    rot = r_wb @ rig.sensor_mount.rotation
    trans = r_wb @ rig.sensor_mount.translation + np.asarray(p.position, float)
    ground = hf.surface_at(trans[0], trans[1])
    if np.isfinite(ground) and trans[2] <= ground:
        raise DomainError("sensor origin is below the surface")
    naz = spec.azimuths_per_sweep
    scan, truth = _cast_sweep(np.broadcast_to(rot, (naz, 3, 3)), np.broadcast_to(trans, (naz, 3)),
                              spec, caster, p.t, rng)
    return (scan, truth) if with_truth else scan


# ---------------------------------------------------------------------------
# trajectory


@dataclass(frozen=True)
class Segment:
    x: float
    y: float
    yaw: float
    length: float
    curvature: float = 0.0  # 1/radius, positive = left turn

    def evaluate(self, s):
        s = np.asarray(s, dtype=float)
        k = self.curvature
        yaw = self.yaw + k * s
        if k == 0.0:
            x = self.x + s * math.cos(self.yaw)
            y = self.y + s * math.sin(self.yaw)
        else:
            x = self.x + (np.sin(yaw) - math.sin(self.yaw)) / k
            y = self.y - (np.cos(yaw) - math.cos(self.yaw)) / k
        return x, y, yaw

    def end(self):
        x, y, yaw = self.evaluate(self.length)
        return float(x), float(y), float(yaw)


class Path:
    """Planar path of straight lines and constant-curvature arcs, arc-length parametrised."""

    def __init__(self, x: float, y: float, yaw: float):
        self.segments: list[Segment] = []
        self._start = (float(x), float(y), float(yaw))

    @property
    def cursor(self):
        return self.segments[-1].end() if self.segments else self._start

    def straight(self, length: float) -> "Path":
        x, y, yaw = self.cursor
        self.segments.append(Segment(x, y, yaw, float(length)))
        return self

    def arc(self, radius: float, angle: float) -> "Path":
        """Turn through ``angle`` radians (positive = left) at ``radius``."""
        if not radius > 0:
            raise DomainError("turn radius must be positive")
        x, y, yaw = self.cursor
        k = math.copysign(1.0 / radius, angle)
        self.segments.append(Segment(x, y, yaw, abs(angle) * radius, k))
        return self

    @property
    def length(self) -> float:
        return sum(s.length for s in self.segments)

    def evaluate(self, s):
        """Position, yaw and curvature at arc lengths ``s`` (clamped to the path)."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        x = np.empty(s.shape)
        y = np.empty(s.shape)
        yaw = np.empty(s.shape)
        curv = np.zeros(s.shape)
        s0 = 0.0
        last = len(self.segments) - 1
        for i, seg in enumerate(self.segments):
            m = (s >= s0) & ((s < s0 + seg.length) | (i == last))
            if m.any():
                x[m], y[m], yaw[m] = seg.evaluate(s[m] - s0)
                curv[m] = seg.curvature
            s0 += seg.length
        return x, y, wrap_angle(yaw), curv

    @classmethod
    def straight_line(cls, x, y, yaw, length):
        return cls(x, y, yaw).straight(length)

    @classmethod
    def s_curve(cls, x=0.0, y=0.0, yaw=0.0, lead=10.0, radius=6.0, angle=math.pi / 2):
        return cls(x, y, yaw).straight(lead).arc(radius, angle).arc(radius, -angle).straight(lead)


@dataclass(frozen=True)
class TrajectorySpec:
    speed: float = 1.0
    base_height: float = 2.2  # base frame above soil
    imu_rate: float = 100.0
    gnss_rate: float = 10.0
    start_time: float = 1179482418.0  # GPS seconds, 2017-05-22 10:00 UTC
    hold_time: float = 0.0  # stationary period before driving
    lead_in: float = 8.0  # straight run before/after the parcel block
    side_offset: float = 1.5  # side passes this far outside the block
    over_every: int = 4  # drive over every n-th parcel row
    pass_offsets: tuple | None = None  # explicit y of each pass
    gyro_bias: float = math.radians(0.5)
    gyro_noise: float = math.radians(0.1)  # rad/s/sqrt(Hz)
    attitude_noise: float = 0.0
    gnss_sigma_h: float = 0.015
    gnss_sigma_v: float = 0.02
    gnss_outages: tuple = ()  # ((t_from, t_to), ...) relative to start_time

    def __post_init__(self):
        if not (self.speed > 0 and self.imu_rate > 0 and self.gnss_rate > 0):
            raise DomainError("speed and rates must be positive")
        if self.over_every < 1:
            raise DomainError("over_every must be >= 1")


def pass_offsets(t: TrajectorySpec, f: FieldSpec) -> list[float]:
    if t.pass_offsets is not None:
        return sorted(float(v) for v in t.pass_offsets)
    _, h = f.extent
    ys = [-t.side_offset]
    for r in range(0, f.parcel_rows, t.over_every):
        ys.append(r * (f.parcel_width + f.gap_y) + 0.5 * f.parcel_width)
    ys.append(h + t.side_offset)
    return sorted(set(ys))


def field_path(t: TrajectorySpec, f: FieldSpec) -> Path:
    """Boustrophedon passes joined by semicircular turns."""
    w, _ = f.extent
    ys = pass_offsets(t, f)
    xa, xb = -t.lead_in, w + t.lead_in
    path = Path(xa, ys[0], 0.0)
    for k, y in enumerate(ys):
        path.straight(xb - xa)
        if k + 1 < len(ys):
            d = ys[k + 1] - y
            # eastbound passes turn left (north), westbound turn right
            path.arc(d / 2.0, math.pi if k % 2 == 0 else -math.pi)
    return path


@dataclass
class Trajectory:
    path: Path
    spec: TrajectorySpec
    field: FieldSpec

    @property
    def t_start(self) -> float:
        return self.spec.start_time

    @property
    def t_end(self) -> float:
        raw = self.spec.hold_time + self.path.length / self.spec.speed
        period = 1.0 / self.spec.gnss_rate
        return self.spec.start_time + math.ceil(raw / period - 1e-9) * period

    def state(self, times):
        """Truth base-frame state: position (n,3), roll, pitch, yaw, yaw_rate."""
        times = np.asarray(times, dtype=float)
        rel = times - self.spec.start_time - self.spec.hold_time
        s = self.spec.speed * rel
        moving = (s > 0) & (s < self.path.length)
        x, y, yaw, curv = self.path.evaluate(s)
        yaw_rate = np.where(moving, self.spec.speed * curv, 0.0)
        z = soil_height(self.field, x, y) + self.spec.base_height
        gx, gy = soil_gradient(self.field, x, y)
        cy, sy = np.cos(yaw), np.sin(yaw)
        pitch = -np.arctan(gx * cy + gy * sy)
        roll = np.arctan(-gx * sy + gy * cy)
        return np.column_stack([x, y, z]), roll, pitch, yaw, yaw_rate


@dataclass
class TrajectoryResult:
    truth: PoseTrack
    imu: ImuStream
    gnss: GnssStream
    trajectory: Trajectory


def _sample_times(start, end, rate):
    n = int(math.floor((end - start) * rate + 1e-6)) + 1
    return start + np.arange(n) / rate


def simulate_trajectory(t: TrajectorySpec, f: FieldSpec, seed: int = 0, path: Path | None = None) -> TrajectoryResult:
    """Truth track plus noisy IMU and GNSS streams on a common clock."""
    traj = Trajectory(path if path is not None else field_path(t, f), t, f)
    rng = _rng(seed, 2)
    frame = f.frame()

    ti = _sample_times(traj.t_start, traj.t_end, t.imu_rate)
    pos, roll, pitch, yaw, yaw_rate = traj.state(ti)
    truth = PoseTrack(ti, pos, roll, pitch, yaw, frame)
    gyro_sigma = t.gyro_noise * math.sqrt(t.imu_rate)
    imu = ImuStream(
        ti,
        roll + rng.normal(0.0, t.attitude_noise, ti.size) if t.attitude_noise > 0 else roll,
        pitch + rng.normal(0.0, t.attitude_noise, ti.size) if t.attitude_noise > 0 else pitch,
        yaw_rate + t.gyro_bias + (rng.normal(0.0, gyro_sigma, ti.size) if gyro_sigma > 0 else 0.0),
    )

    tg = _sample_times(traj.t_start, traj.t_end, t.gnss_rate)
    keep = np.ones(tg.size, bool)
    for a, b in t.gnss_outages:
        keep &= ~((tg - t.start_time > a) & (tg - t.start_time < b))
    tg = tg[keep]
    gpos, *_ = traj.state(tg)
    noise = rng.normal(0.0, 1.0, (tg.size, 3)) * np.array([t.gnss_sigma_h, t.gnss_sigma_h, t.gnss_sigma_v])
    lat, lon, alt = local_to_geographic(gpos + noise, frame)
    gnss = GnssStream(tg, lat, lon, alt, [FixQuality.RTK_FIXED.value] * tg.size)
    return TrajectoryResult(truth, imu, gnss, traj)


def parcel_reach(traj: Trajectory, f: FieldSpec, reach: float = 8.0, seed: int = 0) -> dict:
    """Closest horizontal approach of the drive to each parcel, for coverage checks."""
    ts = _sample_times(traj.t_start, traj.t_end, 2.0)
    pos, *_ = traj.state(ts)
    out = {}
    for p in parcels(f, seed):
        dx = np.maximum(np.maximum(p.x0 - pos[:, 0], pos[:, 0] - p.x1), 0.0)
        dy = np.maximum(np.maximum(p.y0 - pos[:, 1], pos[:, 1] - p.y1), 0.0)
        out[p.id] = float(np.hypot(dx, dy).min())
    return out


# ---------------------------------------------------------------------------
# scans


@dataclass(frozen=True)
class ScanSimOptions:
    heightfield_cell: float = 0.04
    march_step: float = 0.02
    n_bisect: int = 10
    scan_stride: int = 1  # simulate every n-th sweep
    workers: int = 1


def simulate_sweep(traj: Trajectory, sweep_start: float, spec: LidarSpec, rig: RigConfig,
                   caster: RayCaster, rng, with_truth: bool = False):
    """One sweep from the moving vehicle; each azimuth step sees its own pose."""
    times, *_ = _sweep_geometry(spec, sweep_start)
    pos, roll, pitch, yaw, _ = traj.state(times)
    r_wb = rotation_zyx(roll, pitch, yaw)
    m = rig.sensor_mount
    rot = r_wb @ m.rotation
    trans = np.einsum("nij,j->ni", r_wb, m.translation) + pos
    scan, truth = _cast_sweep(rot, trans, spec, caster, sweep_start, rng)
    return (scan, truth) if with_truth else scan


def sweep_starts(traj: Trajectory, spec: LidarSpec, stride: int = 1) -> np.ndarray:
    n = int(math.floor((traj.t_end - traj.t_start) / spec.sweep_period + 1e-9))
    k = np.arange(0, n, max(1, int(stride)))
    return traj.t_start + k * spec.sweep_period


def simulate_scans(traj: Trajectory, spec: LidarSpec, hf: Heightfield, rig: RigConfig, seed: int = 0,
                   opts: ScanSimOptions = ScanSimOptions(), with_truth: bool = False):
    """All sweeps of a drive.

    Each sweep draws its noise from a generator keyed on (seed, sweep index),
    so the result is identical for any worker count.
    """
    caster = RayCaster(hf, opts.march_step, opts.n_bisect)
    starts = sweep_starts(traj, spec, opts.scan_stride)
    idx = np.rint((starts - traj.t_start) / spec.sweep_period).astype(int)

    def one(k):
        return simulate_sweep(traj, float(starts[k]), spec, rig, caster, _rng(seed, 3, int(idx[k])), True)

    if opts.workers > 1:
        with ThreadPoolExecutor(opts.workers) as pool:
            results = list(pool.map(one, range(starts.size)))
    else:
        results = [one(k) for k in range(starts.size)]
    scans = [r[0] for r in results]
    if with_truth:
        return scans, [r[1] for r in results]
    return scans


# ---------------------------------------------------------------------------
# cut areas and biomass


@dataclass(frozen=True)
class CutAreaTruth:
    id: str
    parcel_id: str
    x0: float
    y0: float
    size: float
    volume: float
    e_v: float
    biomass: float
    corners: tuple


def calibrate_biomass_noise(target_r2: float, ev_low: float = 3500.0, ev_high: float = 6200.0,
                            slope: float = REFERENCE_LINEAR.coefficients[1]) -> float:
    """Noise sigma (kg/ha) giving the target R^2 for e_v uniform on [ev_low, ev_high]."""
    if not 0 < target_r2 < 1:
        raise DomainError("target R^2 must lie in (0, 1)")
    signal_sd = abs(slope) * (ev_high - ev_low) / math.sqrt(12.0)
    return signal_sd * math.sqrt((1.0 - target_r2) / target_r2)


def synthetic_biomass(e_v, rng, sigma: float, model: PolyModel = REFERENCE_LINEAR):
    """Fresh biomass (kg/ha) from the reference linear model plus Gaussian noise, floored at 0."""
    e_v = np.asarray(e_v, dtype=float)
    b = predict(model, e_v) + rng.normal(0.0, sigma, e_v.shape)
    return np.maximum(b, 0.0)


def cut_areas(f: FieldSpec, n: int, noise_sigma: float, seed: int = 0, size: float = 0.5,
              edge_margin: float = 0.5) -> list[CutAreaTruth]:
    rng = _rng(seed, 4)
    ps = parcels(f, seed)
    n = min(n, len(ps))
    chosen = np.sort(rng.permutation(len(ps))[:n])
    frame = f.frame()
    out = []
    for k in chosen:
        p = ps[k]
        x0 = rng.uniform(p.x0 + edge_margin, p.x1 - edge_margin - size)
        y0 = rng.uniform(p.y0 + edge_margin, p.y1 - edge_margin - size)
        vol = canopy_volume_in_rect(f, p, x0, y0, x0 + size, y0 + size)
        ev = vol / size**2 * 1e4
        sq = np.array([[x0, y0, 0], [x0 + size, y0, 0], [x0 + size, y0 + size, 0], [x0, y0 + size, 0]])
        lat, lon, alt = local_to_geographic(sq, frame)
        geo = tuple(GeoPoint(float(a), float(b), float(c)) for a, b, c in zip(lat, lon, alt))
        out.append(CutAreaTruth(f"{p.id}-cut", p.id, float(x0), float(y0), size, vol, ev, 0.0, geo))
    bio = synthetic_biomass([c.e_v for c in out], rng, noise_sigma)
    return [CutAreaTruth(c.id, c.parcel_id, c.x0, c.y0, c.size, c.volume, c.e_v, float(b), c.corners)
            for c, b in zip(out, bio)]


# ---------------------------------------------------------------------------
# bundle


@dataclass
class SimBundle:
    field: FieldSpec
    imu: ImuStream
    gnss: GnssStream
    scans: list
    truth: PoseTrack
    parcel_truth: list
    cut_truth: list
    trajectory: Trajectory
    heightfield: Heightfield
    sweep_truth: list | None = None


def simulate_field(f: FieldSpec, t: TrajectorySpec, spec: LidarSpec, rig: RigConfig, seed: int = 0,
                   opts: ScanSimOptions = ScanSimOptions(), n_cut_areas: int = 60,
                   biomass_sigma: float | None = None, with_truth: bool = False) -> SimBundle:
    if biomass_sigma is None:
        biomass_sigma = calibrate_biomass_noise(0.55)
    hf = build_heightfield(f, opts.heightfield_cell, seed)
    tr = simulate_trajectory(t, f, seed)
    scans = simulate_scans(tr.trajectory, spec, hf, rig, seed, opts, with_truth)
    sweep_truth = None
    if with_truth:
        scans, sweep_truth = scans
    return SimBundle(f, tr.imu, tr.gnss, scans, tr.truth, ground_truth(f, seed),
                     cut_areas(f, n_cut_areas, biomass_sigma, seed), tr.trajectory, hf, sweep_truth)
