"""Point-cloud assembly, voxel filtering, ground estimation and plant/soil labelling."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError
from .geodesy import LocalFrame
from .lidar import LidarSpec, Scan, project_scan
from .pose import PoseTrack, RigConfig

UNLABELED = 0
GROUND = 1
PLANT = 2

MAX_ABS_COORD = 1e5


@dataclass
class PointCloud:
    frame: LocalFrame | None
    points: np.ndarray  # (n, 3) float32, origin-relative
    labels: np.ndarray | None = None  # uint8
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise DomainError("point coordinates must be finite")
        if pts.size and np.abs(pts).max() >= MAX_ABS_COORD:
            raise DomainError("point lies too far from the frame origin")
        self.points = pts
        if self.labels is None:
            self.labels = np.zeros(len(pts), dtype=np.uint8)
        else:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (len(pts),):
                raise DomainError("one label per point required")

    def __len__(self):
        return self.points.shape[0]

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.frame, self.points, labels, dict(self.stats))

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.frame, self.points[mask], self.labels[mask], dict(self.stats))

    @classmethod
    def empty(cls, frame=None) -> "PointCloud":
        return cls(frame, np.empty((0, 3), np.float32))


def _frame_offset(src: LocalFrame | None, dst: LocalFrame | None) -> np.ndarray:
    if src is None or dst is None:
        return np.zeros(3)
    a, b = src.origin, dst.origin
    if a.zone != b.zone or a.south != b.south:
        raise DomainError("track and cloud frames are in different UTM zones")
    return np.array([a.easting - b.easting, a.northing - b.northing, a.altitude - b.altitude])


def assemble(scans, track: PoseTrack, rig: RigConfig, spec: LidarSpec, frame: LocalFrame | None = None,
             workers: int = 1) -> PointCloud:
    """Project every scan and concatenate in sweep-start order."""
    if frame is None:
        frame = track.frame
    order = sorted(range(len(scans)), key=lambda i: (scans[i].sweep_start, i))
    ordered = [scans[i] for i in order]
    offset = _frame_offset(track.frame, frame)

    def one(s: Scan):
        return project_scan(s, track, rig, spec)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, ordered))
    else:
        results = [one(s) for s in ordered]
    stats = {"n_scans": len(scans), "n_skipped": 0, "n_outside": 0, "n_degraded": 0}
    parts = []
    for r in results:
        stats["n_outside"] += r.n_outside
        stats["n_degraded"] += r.n_degraded
        if r.rejected:
            stats["n_skipped"] += 1
        if len(r.points):
            parts.append(r.points)
    pts = np.concatenate(parts) + offset if parts else np.empty((0, 3))
    return PointCloud(frame, pts, stats=stats)


# ---------------------------------------------------------------------------
# voxel grid


def _snap_into_cell(v: np.ndarray, k: np.ndarray, leaf: float) -> np.ndarray:
    """Nudge float32 centroids that rounded across a cell wall back inside."""
    lo = (k * leaf).astype(np.float32)
    for _ in range(4):
        below = np.floor(v.astype(np.float64) / leaf) < k
        above = np.floor(v.astype(np.float64) / leaf) > k
        if not (below.any() or above.any()):
            break
        v = np.where(below, np.nextafter(np.maximum(v, lo), np.float32(np.inf)), v)
        v = np.where(above, np.nextafter(v, np.float32(-np.inf)), v)
    return v


@dataclass
class VoxelGrid:
    leaf: float
    keys: np.ndarray  # (m, 3) int64 cell indices
    counts: np.ndarray
    centroids: np.ndarray  # (m, 3) float32
    labels: np.ndarray


def voxel_grid(c: PointCloud, leaf: float, tie_order=(PLANT, GROUND, UNLABELED)) -> VoxelGrid:
    if not leaf > 0:
        raise DomainError("leaf must be positive")
    if len(c) == 0:
        return VoxelGrid(leaf, np.empty((0, 3), np.int64), np.empty(0, np.int64), np.empty((0, 3), np.float32),
                         np.empty(0, np.uint8))
    p = c.points.astype(np.float64)
    k = np.floor(p / leaf).astype(np.int64)
    kmin = k.min(axis=0)
    span = k.max(axis=0) - kmin + 1
    code = ((k[:, 0] - kmin[0]) * span[1] + (k[:, 1] - kmin[1])) * span[2] + (k[:, 2] - kmin[2])
    uniq, inv = np.unique(code, return_inverse=True)
    m = uniq.size
    counts = np.bincount(inv, minlength=m)
    cent = np.stack([np.bincount(inv, weights=p[:, j], minlength=m) for j in range(3)], axis=1) / counts[:, None]
    keys = np.empty((m, 3), np.int64)
    keys[:, 2] = uniq % span[2] + kmin[2]
    keys[:, 1] = (uniq // span[2]) % span[1] + kmin[1]
    keys[:, 0] = uniq // (span[2] * span[1]) + kmin[0]
    cent = np.clip(cent, keys * leaf, (keys + 1) * leaf)
    cent32 = _snap_into_cell(cent.astype(np.float32), keys, leaf)
    votes = np.bincount(inv * 3 + c.labels.astype(np.int64), minlength=3 * m).reshape(m, 3)
    order = np.asarray(tie_order)
    labels = order[np.argmax(votes[:, order], axis=1)].astype(np.uint8)
    return VoxelGrid(leaf, keys, counts, cent32, labels)


def voxel_downsample(c: PointCloud, leaf: float = 0.05) -> PointCloud:
    """One point per occupied voxel at the members' centroid; majority label, ties go to plant."""
    g = voxel_grid(c, leaf)
    out = PointCloud(c.frame, g.centroids, g.labels, dict(c.stats))
    return out


# ---------------------------------------------------------------------------
# ground model


@dataclass
class GroundModel:
    x0: float
    y0: float
    cell: float
    z: np.ndarray  # (ny, nx); NaN where invalid
    valid: np.ndarray

    @property
    def shape(self):
        return self.z.shape

    def cell_index(self, x, y):
        ix = np.floor((np.asarray(x, dtype=np.float64) - self.x0) / self.cell).astype(np.int64)
        iy = np.floor((np.asarray(y, dtype=np.float64) - self.y0) / self.cell).astype(np.int64)
        return iy, ix

    def ground_at(self, x, y):
        """Ground elevation of the containing cell; NaN outside or over invalid cells."""
        iy, ix = self.cell_index(x, y)
        shape = np.shape(ix)
        iy, ix = np.atleast_1d(iy), np.atleast_1d(ix)
        ny, nx = self.shape
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        out = np.full(ix.shape, np.nan)
        out[ok] = np.where(self.valid[iy[ok], ix[ok]], self.z[iy[ok], ix[ok]], np.nan)
        return out.reshape(shape)

    @property
    def invalid_fraction(self) -> float:
        return 1.0 - float(self.valid.mean()) if self.valid.size else 1.0


@dataclass(frozen=True)
class GroundOptions:
    cell: float = 0.25
    percentile: float = 0.05
    min_count: int = 5
    reject_window: float = 12.0  # 0 disables non-ground cell rejection
    max_step: float = 0.15
    max_spread: float = 0.10  # median minus low percentile; 0 disables
    refine_band: float = 0.10  # 0 disables median refinement
    refine_iterations: int = 2
    smooth: bool = True
    fill_radius: float = 3.0


def _group_cells(x, y, cell):
    ix = np.floor(x / cell).astype(np.int64)
    iy = np.floor(y / cell).astype(np.int64)
    ix0, iy0 = ix.min(), iy.min()
    nx, ny = ix.max() - ix0 + 1, iy.max() - iy0 + 1
    flat = (iy - iy0) * nx + (ix - ix0)
    return flat, int(ix0), int(iy0), int(nx), int(ny)


def _group_percentile(flat, z, n_cells, q):
    """Linear-interpolated quantile q of z within each group, plus counts."""
    order = np.lexsort((z, flat))
    fs, zs = flat[order], z[order]
    counts = np.bincount(fs, minlength=n_cells)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    out = np.full(n_cells, np.nan)
    has = counts > 0
    pos = q * (counts[has] - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, counts[has] - 1)
    w = pos - lo
    s = starts[has]
    out[has] = zs[s + lo] * (1 - w) + zs[s + hi] * w
    return out, counts


def _group_median_in_band(flat, z, ref, band, n_cells):
    r = ref[flat]
    m = np.isfinite(r) & (np.abs(z - r) <= band)
    med, counts = _group_percentile(flat[m], z[m], n_cells, 0.5)
    return np.where(counts > 0, med, ref)


def _nan_median3(a):
    ny, nx = a.shape
    p = np.pad(a, 1, constant_values=np.nan)
    stack = np.stack([p[dy:dy + ny, dx:dx + nx] for dy in range(3) for dx in range(3)])
    valid = np.isfinite(a)
    out = np.full_like(a, np.nan)
    if valid.any():
        out[valid] = np.nanmedian(stack[:, valid], axis=0)
    return out


def estimate_ground(c: PointCloud, cell: float = 0.25, percentile: float = 0.05,
                    opts: GroundOptions | None = None) -> GroundModel:
    """Low-percentile ground raster with non-ground rejection, refinement, smoothing and fill."""
    if opts is None:
        opts = GroundOptions(cell=cell, percentile=percentile)
    cell, q = opts.cell, opts.percentile
    if not cell > 0:
        raise DomainError("cell must be positive")
    if not 0 < q < 0.5:
        raise DomainError("percentile must lie in (0, 0.5)")
    if len(c) == 0:
        return GroundModel(0.0, 0.0, cell, np.full((0, 0), np.nan), np.zeros((0, 0), bool))
    p = c.points.astype(np.float64)
    flat, ix0, iy0, nx, ny = _group_cells(p[:, 0], p[:, 1], cell)
    z = p[:, 2]
    low, counts = _group_percentile(flat, z, nx * ny, q)
    low[counts < opts.min_count] = np.nan
    if opts.max_spread > 0:
        # cells straddling a canopy wall hold returns spread over its height
        med, _ = _group_percentile(flat, z, nx * ny, 0.5)
        low[med - low > opts.max_spread] = np.nan

    grid = low.reshape(ny, nx)
    if opts.reject_window > 0:
        size = 2 * int(round(0.5 * opts.reject_window / cell)) + 1
        floor = ndimage.minimum_filter(np.where(np.isfinite(grid), grid, np.inf), size=size, mode="nearest")
        grid = np.where(grid - floor > opts.max_step, np.nan, grid)
    ref = grid.ravel()
    if opts.refine_band > 0:
        for _ in range(opts.refine_iterations):
            ref = _group_median_in_band(flat, z, ref, opts.refine_band, nx * ny)
    grid = ref.reshape(ny, nx)
    if opts.smooth:
        grid = _nan_median3(grid)
    valid = np.isfinite(grid)
    if opts.fill_radius > 0 and valid.any() and not valid.all():
        dist, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
        fill = ~valid & (dist * cell <= opts.fill_radius)
        grid = np.where(fill, grid[iy, ix], grid)
        valid = valid | fill
    return GroundModel(ix0 * cell, iy0 * cell, cell, grid, valid)


def height_above_ground(c: PointCloud, g: GroundModel) -> np.ndarray:
    p = c.points.astype(np.float64)
    return p[:, 2] - g.ground_at(p[:, 0], p[:, 1])


def segment(c: PointCloud, g: GroundModel, h_thresh: float = 0.10) -> PointCloud:
    """Plant iff height above ground exceeds h_thresh; unlabeled over invalid ground."""
    h = height_above_ground(c, g)
    labels = np.full(len(c), UNLABELED, np.uint8)
    ok = np.isfinite(h)
    labels[ok] = np.where(h[ok] > h_thresh, PLANT, GROUND)
    return c.with_labels(labels)
