"""On-disk formats: CSV tables, the binary scan log and PLY point clouds.

Floats are written with ``repr`` so every CSV round-trips exactly.
All writers go through :func:`atomic_write` (temp file + rename).
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .geodesy import GeoPoint, LocalFrame, UtmCoord
from .lidar import Scan
from .pose import FixQuality, GnssStream, ImuStream

IMU_HEADER = ["t", "roll_rad", "pitch_rad", "yaw_rate_rad_s"]
GNSS_HEADER = ["t", "lat_deg", "lon_deg", "alt_m", "quality"]
CORNER_HEADER = ["id"] + [f"{k}{i}" for i in range(1, 5) for k in ("lat", "lon")]
CUT_CORNER_HEADER = ["id", "parcel_id"] + CORNER_HEADER[1:]
SAMPLE_HEADER = ["id", "e_v_m3_ha", "biomass_kg_ha"]
TRUTH_HEADER = ["id", "canopy_height_m", "footprint_m2", "volume_m3", "e_v_m3_ha"]
CUT_TRUTH_HEADER = ["id", "parcel_id", "volume_m3", "e_v_m3_ha", "biomass_kg_ha"]
METRICS_HEADER = ["id", "n_points", "n_plant", "footprint_m2", "volume_m3", "e_v_m3_per_ha", "method", "confidence"]

SCAN_MAGIC = b"CMSCAN01"
SWEEP_HEADER = np.dtype([("sweep_start", "<f8"), ("n", "<u4")])
SCAN_RECORD = np.dtype([("t", "<f8"), ("channel", "u1"), ("azimuth", "<f4"), ("range", "<f4")])
PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("label", "u1")])


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def atomic_write(path, data: bytes | str):
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write(path, csv_text(header, rows))


def read_csv(path_or_text, header, required=None, text=False):
    """Rows as dicts; the header must contain ``required`` (default: all of ``header``)."""
    src = path_or_text if text else Path(path_or_text).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(src))
    try:
        got = next(reader)
    except StopIteration:
        raise SchemaError("file is empty, header expected") from None
    got = [h.strip() for h in got]
    need = header if required is None else required
    missing = [h for h in need if h not in got]
    if missing:
        raise SchemaError(f"missing columns {missing}", row=1)
    unknown = [h for h in got if h not in header]
    if unknown:
        raise SchemaError(f"unknown columns {unknown}", row=1)
    rows = []
    for i, r in enumerate(reader, start=2):
        if not r or all(not v.strip() for v in r):
            continue
        if len(r) != len(got):
            raise SchemaError(f"expected {len(got)} fields, got {len(r)}", row=i)
        rows.append((i, dict(zip(got, (v.strip() for v in r)))))
    return rows


def _float(row, key, i, optional=False):
    v = row.get(key, "")
    if v == "" and optional:
        return None
    try:
        x = float(v)
    except ValueError:
        raise SchemaError(f"not a number: {v!r}", row=i, column=key) from None
    if not math.isfinite(x):
        raise SchemaError(f"not finite: {v!r}", row=i, column=key)
    return x


# ---------------------------------------------------------------------------
# streams


def write_imu(path, imu: ImuStream):
    write_csv(path, IMU_HEADER, zip(imu.t, imu.roll, imu.pitch, imu.yaw_rate))


def read_imu(path) -> ImuStream:
    rows = read_csv(path, IMU_HEADER)
    cols = [[_float(r, k, i) for i, r in rows] for k in IMU_HEADER]
    try:
        return ImuStream(*cols)
    except ValueError as e:
        raise SchemaError(f"imu: {e}") from None


def write_gnss(path, g: GnssStream):
    write_csv(path, GNSS_HEADER, zip(g.t, g.lat, g.lon, g.alt, g.quality))


def read_gnss(path) -> GnssStream:
    rows = read_csv(path, GNSS_HEADER)
    qual = []
    valid = {q.value for q in FixQuality}
    for i, r in rows:
        if r["quality"] not in valid:
            raise SchemaError(f"unknown fix quality {r['quality']!r}", row=i, column="quality")
        qual.append(r["quality"])
    cols = [[_float(r, k, i) for i, r in rows] for k in GNSS_HEADER[:4]]
    try:
        return GnssStream(*cols, qual)
    except ValueError as e:
        raise SchemaError(f"gnss: {e}") from None


# ---------------------------------------------------------------------------
# scans


def encode_scans(scans) -> bytes:
    parts = [SCAN_MAGIC]
    for s in scans:
        parts.append(np.array([(s.sweep_start, len(s))], dtype=SWEEP_HEADER).tobytes())
        rec = np.empty(len(s), dtype=SCAN_RECORD)
        rec["t"], rec["channel"], rec["azimuth"], rec["range"] = s.t, s.channel, s.azimuth, s.range
        parts.append(rec.tobytes())
    return b"".join(parts)


def decode_scans(data: bytes) -> list[Scan]:
    if data[:8] != SCAN_MAGIC:
        raise SchemaError("scan file does not start with CMSCAN01")
    out = []
    pos = 8
    while pos < len(data):
        if pos + SWEEP_HEADER.itemsize > len(data):
            raise SchemaError(f"truncated sweep header at byte {pos}")
        h = np.frombuffer(data, SWEEP_HEADER, 1, pos)[0]
        pos += SWEEP_HEADER.itemsize
        n = int(h["n"])
        end = pos + n * SCAN_RECORD.itemsize
        if end > len(data):
            raise SchemaError(f"truncated sweep at byte {pos}: {n} returns announced")
        rec = np.frombuffer(data, SCAN_RECORD, n, pos)
        out.append(Scan(float(h["sweep_start"]), rec["t"].copy(), rec["channel"].copy(), rec["azimuth"].copy(),
                        rec["range"].copy()))
        pos = end
    return out


def write_scans(path, scans):
    atomic_write(path, encode_scans(scans))


def read_scans(path) -> list[Scan]:
    return decode_scans(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# corners and samples


def write_corners(path, records):
    """records: (id, [GeoPoint x4])."""
    rows = []
    for rid, pts in records:
        row = [rid]
        for p in pts:
            row += [p.latitude, p.longitude]
        rows.append(row)
    write_csv(path, CORNER_HEADER, rows)


def _corner_points(r, i):
    pts = []
    for k in range(1, 5):
        lat = _float(r, f"lat{k}", i, optional=True)
        lon = _float(r, f"lon{k}", i, optional=True)
        if (lat is None) != (lon is None):
            raise SchemaError("latitude without longitude", row=i, column=f"lat{k}")
        if lat is not None:
            try:
                pts.append(GeoPoint(lat, lon))
            except ValueError as e:
                raise SchemaError(str(e), row=i, column=f"lat{k}") from None
    return pts


def read_corners(path):
    """(id, [GeoPoint, ...]) per row; rows with missing corners keep fewer points."""
    out = []
    for i, r in read_csv(path, CORNER_HEADER, required=["id"]):
        out.append((r["id"], _corner_points(r, i)))
    return out


def write_cut_corners(path, records):
    """records: (id, parcel_id, [GeoPoint x4])."""
    rows = []
    for rid, pid, pts in records:
        row = [rid, pid]
        for p in pts:
            row += [p.latitude, p.longitude]
        rows.append(row)
    write_csv(path, CUT_CORNER_HEADER, rows)


def read_cut_corners(path):
    out = []
    for i, r in read_csv(path, CUT_CORNER_HEADER, required=["id", "parcel_id"]):
        out.append((r["id"], r["parcel_id"], _corner_points(r, i)))
    return out


def write_samples(path, rows):
    """rows: (id, e_v or None, biomass)."""
    write_csv(path, SAMPLE_HEADER, rows)


def read_samples(path):
    """(id, e_v or None, biomass) per row."""
    out = []
    seen = set()
    for i, r in read_csv(path, SAMPLE_HEADER, required=["id", "biomass_kg_ha"]):
        if r["id"] in seen:
            raise SchemaError(f"duplicate sample id {r['id']!r}", row=i, column="id")
        seen.add(r["id"])
        ev = _float(r, "e_v_m3_ha", i, optional=True)
        b = _float(r, "biomass_kg_ha", i)
        if b < 0 or (ev is not None and ev < 0):
            raise SchemaError("negative value", row=i)
        out.append((r["id"], ev, b))
    return out


def read_metrics(path):
    """Metrics CSV as dicts with typed numeric fields."""
    out = []
    for i, r in read_csv(path, METRICS_HEADER):
        d = dict(r)
        for k in ("n_points", "n_plant"):
            try:
                d[k] = int(r[k])
            except ValueError:
                raise SchemaError(f"not an integer: {r[k]!r}", row=i, column=k) from None
        for k in ("footprint_m2", "volume_m3", "e_v_m3_per_ha"):
            d[k] = _float(r, k, i)
        out.append(d)
    return out


def write_metrics(path, metrics):
    rows = [(m.id, m.n_points, m.n_plant_points, m.footprint, m.volume, m.e_v, m.method,
             "low" if m.low_confidence else "ok") for m in metrics]
    write_csv(path, METRICS_HEADER, rows)


# ---------------------------------------------------------------------------
# point clouds


def encode_ply(points, labels, frame: LocalFrame | None) -> bytes:
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    lines = ["ply", "format binary_little_endian 1.0"]
    if frame is not None:
        o = frame.origin
        lines += [
            f"comment origin_utm_zone {o.zone}{'S' if o.south else 'N'}",
            f"comment origin_easting {o.easting!r}",
            f"comment origin_northing {o.northing!r}",
            f"comment origin_alt {float(o.altitude)!r}",
        ]
    lines += [f"element vertex {len(pts)}", "property float x", "property float y", "property float z",
              "property uchar label", "end_header"]
    rec = np.empty(len(pts), dtype=PLY_VERTEX)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    rec["label"] = labels
    return ("\n".join(lines) + "\n").encode("ascii") + rec.tobytes()


def decode_ply(data: bytes):
    """Returns (points float32 (n,3), labels uint8, frame or None)."""
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise SchemaError("not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise SchemaError("only binary little-endian PLY is supported")
    meta = {}
    n = None
    props = []
    for line in header:
        parts = line.split()
        if parts[:1] == ["comment"] and len(parts) >= 3:
            meta[parts[1]] = parts[2]
        elif parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"]:
            props.append((parts[1], parts[2]))
    if props != [("float", "x"), ("float", "y"), ("float", "z"), ("uchar", "label")]:
        raise SchemaError(f"unexpected vertex properties {props}")
    if n is None or len(body) < n * PLY_VERTEX.itemsize:
        raise SchemaError("PLY body shorter than announced")
    rec = np.frombuffer(body, PLY_VERTEX, n)
    pts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float32)
    frame = None
    if "origin_utm_zone" in meta:
        z = meta["origin_utm_zone"]
        try:
            origin = UtmCoord(int(z[:-1]), z[-1] == "S", float(meta["origin_easting"]),
                              float(meta["origin_northing"]), float(meta.get("origin_alt", 0.0)))
        except (KeyError, ValueError) as e:
            raise SchemaError(f"bad origin metadata: {e}") from None
        frame = LocalFrame(origin)
    return pts, rec["label"].copy(), frame


def write_ply(path, cloud):
    atomic_write(path, encode_ply(cloud.points, cloud.labels, cloud.frame))


def read_ply(path):
    from .cloud import PointCloud

    pts, labels, frame = decode_ply(Path(path).read_bytes())
    return PointCloud(frame, pts, labels)
