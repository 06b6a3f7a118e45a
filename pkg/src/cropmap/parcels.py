"""Parcel and cut-area boundaries, clipping, and canopy volume metrics."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cloud import PLANT, GroundModel, PointCloud
from .errors import DomainError
from .geodesy import GeoPoint, LocalFrame, geographic_to_local

CUT_AREA_BAND = (0.2, 0.3)


class VolumeMethod(str, Enum):
    VOXEL_OCCUPANCY = "voxel_occupancy"
    COLUMN_HEIGHT = "column_height"


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counter-clockwise vertices."""
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def order_corners(points) -> np.ndarray:
    """Sort four corners counter-clockwise about their centroid; reject non-convex or degenerate sets."""
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] < 2:
        raise DomainError("corners must be (x, y) pairs")
    if p.shape[0] != 4:
        raise DomainError(f"expected 4 corners, got {p.shape[0]}")
    p = p[:, :2]
    c = p.mean(axis=0)
    ang = np.arctan2(p[:, 1] - c[1], p[:, 0] - c[0])
    q = p[np.argsort(ang, kind="stable")]
    scale = float(np.max(np.abs(q - c))) or 1.0
    e = np.roll(q, -1, axis=0) - q
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    # relative tolerance; geodetic "straight" lines bow by ~1e-7 m once projected
    if np.any(cross <= 1e-6 * scale * scale):
        raise DomainError("corners are degenerate or do not form a convex quadrilateral")
    return q


def points_in_polygon(xy, poly) -> np.ndarray:
    """Crossing-number test; left/bottom edges inside, right/top edges outside.

    Every edge is evaluated from its lower to its upper endpoint so a shared
    edge gives bit-identical crossings for both neighbouring polygons.
    """
    xy = np.asarray(xy, dtype=float)
    x, y = xy[:, 0], xy[:, 1]
    poly = np.asarray(poly, dtype=float)
    inside = np.zeros(x.shape, bool)
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if a[1] == b[1]:
            continue
        if a[1] > b[1]:
            a, b = b, a
        m = (y >= a[1]) & (y < b[1])
        if not m.any():
            continue
        xint = a[0] + (y[m] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
        hit = np.zeros_like(m)
        hit[m] = x[m] < xint
        inside ^= hit
    return inside


@dataclass(frozen=True)
class ParcelBoundary:
    id: str
    corners: tuple  # GeoPoints as logged
    polygon: np.ndarray  # (4, 2) local, counter-clockwise

    @property
    def area(self) -> float:
        return polygon_area(self.polygon)


@dataclass(frozen=True)
class CutArea:
    id: str
    parcel_id: str
    corners: tuple
    polygon: np.ndarray
    biomass: float | None = None

    @property
    def area(self) -> float:
        return polygon_area(self.polygon)


@dataclass
class LoadReport:
    loaded: int = 0
    errors: list = None

    def __post_init__(self):
        if self.errors is None:
            self.errors = []


def local_polygon(corners, frame: LocalFrame) -> np.ndarray:
    lat = [c.latitude for c in corners]
    lon = [c.longitude for c in corners]
    xyz = geographic_to_local(lat, lon, np.zeros(len(corners)), frame)
    return order_corners(xyz[:, :2])


def load_boundaries(records, frame: LocalFrame, report: LoadReport | None = None) -> list[ParcelBoundary]:
    """records: iterable of (id, [GeoPoint, ...]). Bad records are skipped and reported."""
    out = []
    report = report if report is not None else LoadReport()
    for rid, corners in records:
        try:
            if len(corners) != 4:
                raise DomainError(f"expected 4 corners, got {len(corners)}")
            poly = local_polygon(corners, frame)
        except DomainError as e:
            report.errors.append((rid, str(e)))
            continue
        out.append(ParcelBoundary(rid, tuple(corners), poly))
        report.loaded += 1
    return out


def load_cut_areas(records, frame: LocalFrame, report: LoadReport | None = None) -> list[CutArea]:
    """records: iterable of (id, parcel_id, [GeoPoint x4], biomass or None)."""
    out = []
    report = report if report is not None else LoadReport()
    lo, hi = CUT_AREA_BAND
    for rid, pid, corners, biomass in records:
        try:
            if len(corners) != 4:
                raise DomainError(f"expected 4 corners, got {len(corners)}")
            poly = local_polygon(corners, frame)
            a = polygon_area(poly)
            if not lo <= a <= hi:
                raise DomainError(f"cut area of {a:.3f} m2 outside [{lo}, {hi}]")
        except DomainError as e:
            report.errors.append((rid, str(e)))
            continue
        out.append(CutArea(rid, pid, tuple(corners), poly, biomass))
        report.loaded += 1
    return out


def clip(c: PointCloud, poly) -> PointCloud:
    if len(c) == 0:
        return c.subset(np.zeros(0, bool))
    p = np.asarray(poly, dtype=float)
    lo, hi = p.min(axis=0), p.max(axis=0)
    xy = c.points[:, :2].astype(np.float64)
    box = (xy[:, 0] >= lo[0]) & (xy[:, 0] <= hi[0]) & (xy[:, 1] >= lo[1]) & (xy[:, 1] <= hi[1])
    mask = np.zeros(len(c), bool)
    idx = np.nonzero(box)[0]
    mask[idx] = points_in_polygon(xy[idx], p)
    return c.subset(mask)


@dataclass(frozen=True)
class ParcelMetrics:
    id: str
    n_points: int
    n_plant_points: int
    footprint: float
    volume: float
    e_v: float
    method: str
    low_confidence: bool = False
    ground_invalid_fraction: float = 0.0

    def __post_init__(self):
        if self.footprint <= 0:
            raise DomainError("footprint must be positive")
        if self.volume < 0 or self.n_points < 0 or self.n_plant_points < 0:
            raise DomainError("metrics must be non-negative")


def _clip_convex(subject, poly):
    """Sutherland-Hodgman clip of a polygon against a counter-clockwise convex polygon."""
    out = list(subject)
    n = len(poly)
    for i in range(n):
        if not out:
            break
        a, b = poly[i], poly[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp, out = out, []
        for j in range(len(inp)):
            p, q = inp[j - 1], inp[j]
            sp = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
            sq = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
                out.append(q)
            elif sp >= 0:
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def column_weights(poly, leaf):
    """Leaf-sized columns overlapping a convex polygon and the fraction of each inside it."""
    p = np.asarray(poly, dtype=float)
    lo = np.floor(p.min(axis=0) / leaf).astype(np.int64)
    hi = np.floor(p.max(axis=0) / leaf).astype(np.int64)
    kx, ky = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
    keys = np.column_stack([kx.ravel(), ky.ravel()])
    x0, y0 = keys[:, 0] * leaf, keys[:, 1] * leaf
    corners = [(x0, y0), (x0 + leaf, y0), (x0 + leaf, y0 + leaf), (x0, y0 + leaf)]
    n = len(p)
    all_in = np.ones(len(keys), bool)
    for i in range(n):
        a, b = p[i], p[(i + 1) % n]
        for cx, cy in corners:
            all_in &= (b[0] - a[0]) * (cy - a[1]) - (b[1] - a[1]) * (cx - a[0]) >= 0
    w = all_in.astype(float)
    ring = list(map(tuple, p))
    for i in np.nonzero(~all_in)[0]:
        sq = [(x0[i], y0[i]), (x0[i] + leaf, y0[i]), (x0[i] + leaf, y0[i] + leaf), (x0[i], y0[i] + leaf)]
        clipped = _clip_convex(sq, ring)
        if len(clipped) >= 3:
            w[i] = max(polygon_area(clipped), 0.0) / leaf**2
    keep = w > 0
    return keys[keep], (keys[keep] + 0.5) * leaf, w[keep]


def canopy_volume(c: PointCloud, g: GroundModel, poly, leaf: float = 0.05,
                  method: str | VolumeMethod = VolumeMethod.VOXEL_OCCUPANCY, id: str = "",
                  column_stat: str = "max", unobserved: str = "ignore", invalid_threshold: float = 0.2,
                  min_plant_points: int = 0) -> ParcelMetrics:
    """Canopy volume of the plant points of ``c`` (already clipped to ``poly``).

    column_height sums (stat of plant z - ground) times the area of each
    leaf-sized column that lies inside the polygon. With ``unobserved="scale"``
    the sum is divided by the fraction of columns that hold any point, which
    corrects for columns the scanner never reached.
    """
    if not leaf > 0:
        raise DomainError("leaf must be positive")
    method = VolumeMethod(method)
    footprint = polygon_area(poly)
    if footprint <= 0:
        raise DomainError("polygon must be counter-clockwise with positive area")
    plant = c.points[c.labels == PLANT].astype(np.float64)
    keys, centres, weights = column_weights(poly, leaf)
    gz = g.ground_at(centres[:, 0], centres[:, 1]) if len(centres) else np.empty(0)
    invalid = float(np.average(~np.isfinite(gz), weights=weights)) if gz.size else 1.0

    volume = 0.0
    if method is VolumeMethod.VOXEL_OCCUPANCY:
        if len(plant):
            vk = np.floor(plant / leaf).astype(np.int64)
            volume = np.unique(vk, axis=0).shape[0] * leaf**3
    else:
        if len(plant) and len(keys):
            volume = _column_volume(plant, keys, gz, weights, leaf, column_stat)
            if unobserved == "scale":
                all_keys = np.floor(c.points[:, :2].astype(np.float64) / leaf).astype(np.int64)
                seen = _member(keys, all_keys)
                frac = float(np.average(seen, weights=weights))
                volume = volume / frac if frac > 0 else 0.0
            elif unobserved != "ignore":
                raise DomainError(f"unknown unobserved policy {unobserved!r}")
    e_v = volume / footprint * 1e4
    low = invalid > invalid_threshold or (min_plant_points > 0 and len(plant) < min_plant_points)
    return ParcelMetrics(id, len(c), len(plant), footprint, volume, e_v, method.value, bool(low), invalid)


def _member(keys, others):
    """Which rows of ``keys`` (m, 2) appear among ``others`` (n, 2)."""
    if len(others) == 0:
        return np.zeros(len(keys), bool)
    lo = np.minimum(keys.min(axis=0), others.min(axis=0))
    span = np.maximum(keys.max(axis=0), others.max(axis=0)) - lo + 1
    code_k = (keys[:, 0] - lo[0]) * span[1] + (keys[:, 1] - lo[1])
    code_o = (others[:, 0] - lo[0]) * span[1] + (others[:, 1] - lo[1])
    return np.isin(code_k, code_o)


def _column_median(col, z, n):
    srt = np.lexsort((z, col))
    cs, zs = col[srt], z[srt]
    counts = np.bincount(cs, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    top = np.full(n, -np.inf)
    has = counts > 0
    lo_i = starts[has] + (counts[has] - 1) // 2
    hi_i = starts[has] + counts[has] // 2
    top[has] = 0.5 * (zs[lo_i] + zs[hi_i])
    return top


def _column_volume(plant, keys, gz, weights, leaf, stat, top_band=0.10):
    pk = np.floor(plant[:, :2] / leaf).astype(np.int64)
    lo = np.minimum(keys.min(axis=0), pk.min(axis=0))
    span = np.maximum(keys.max(axis=0), pk.max(axis=0)) - lo + 1
    code_k = (keys[:, 0] - lo[0]) * span[1] + (keys[:, 1] - lo[1])
    code_p = (pk[:, 0] - lo[0]) * span[1] + (pk[:, 1] - lo[1])
    order = np.argsort(code_k)
    sk = code_k[order]
    pos = np.searchsorted(sk, code_p)
    pos_c = np.minimum(pos, len(sk) - 1)
    match = sk[pos_c] == code_p
    col = order[pos_c[match]]
    z = plant[match, 2]
    if stat == "max":
        top = np.full(len(keys), -np.inf)
        np.maximum.at(top, col, z)
    elif stat == "median":
        top = _column_median(col, z, len(keys))
    elif stat == "top":
        # median of the returns within top_band of the column maximum; ignores wall returns further down
        top_max = np.full(len(keys), -np.inf)
        np.maximum.at(top_max, col, z)
        keep = z >= top_max[col] - top_band
        col, z = col[keep], z[keep]
        top = _column_median(col, z, len(keys))
    elif stat == "mean":
        counts = np.bincount(col, minlength=len(keys))
        sums = np.bincount(col, weights=z, minlength=len(keys))
        top = np.where(counts > 0, sums / np.maximum(counts, 1), -np.inf)
    else:
        raise DomainError(f"unknown column statistic {stat!r}")
    occupied = np.isfinite(top) & np.isfinite(gz)
    h = np.maximum(top[occupied] - gz[occupied], 0.0)
    return float(np.dot(h, weights[occupied]) * leaf * leaf)


@dataclass(frozen=True)
class VolumeConfig:
    leaf: float = 0.05
    method: str = "voxel_occupancy"
    column_stat: str = "median"
    unobserved: str = "scale"
    invalid_threshold: float = 0.2
    cut_min_plant_points: int = 50


def batch_metrics(c: PointCloud, areas, g: GroundModel, cfg: VolumeConfig = VolumeConfig(),
                  failures: list | None = None, workers: int = 1) -> list[ParcelMetrics]:
    """Metrics for each boundary or cut area, sorted by id."""
    ids = [a.id for a in areas]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise DomainError(f"duplicate boundary ids: {', '.join(dup)}")
    min_pts = cfg.cut_min_plant_points

    def one(a):
        try:
            return canopy_volume(clip(c, a.polygon), g, a.polygon, cfg.leaf, cfg.method, a.id, cfg.column_stat,
                                 cfg.unobserved, cfg.invalid_threshold,
                                 min_pts if isinstance(a, CutArea) else 0)
        except DomainError as e:
            return e

    ordered = sorted(areas, key=lambda a: a.id)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, ordered))
    else:
        results = [one(a) for a in ordered]
    out = []
    for a, r in zip(ordered, results):
        if isinstance(r, Exception):
            if failures is not None:
                failures.append((a.id, str(r)))
        else:
            out.append(r)
    return out


def geo_corners(points) -> tuple:
    return tuple(p if isinstance(p, GeoPoint) else GeoPoint(*p) for p in points)
