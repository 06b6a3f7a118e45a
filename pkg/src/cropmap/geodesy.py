"""WGS84 <-> UTM conversion and UTM-anchored local working frames.

The projection uses the Krüger series for the transverse Mercator,
carried to sixth order in the third flattening ``n`` (Karney 2011).
Truncation error is at the nanometre level inside a zone, so results can
be compared against an independent library at sub-millimetre tolerance.

All array functions accept scalars or numpy arrays and broadcast.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

WGS84_A = 6378137.0
WGS84_INV_F = 298.257223563
UTM_K0 = 0.9996
FALSE_EASTING = 500000.0
FALSE_NORTHING_SOUTH = 10000000.0

_F = 1.0 / WGS84_INV_F
_E2 = _F * (2.0 - _F)
_E = math.sqrt(_E2)
_N = _F / (2.0 - _F)

# rectifying radius
_A_RECT = WGS84_A / (1.0 + _N) * (1.0 + _N**2 / 4.0 + _N**4 / 64.0 + _N**6 / 256.0)


def _series(rows):
    return np.array([sum(c * _N**p for p, c in row) for row in rows])


_ALPHA = _series([
    [(1, 1 / 2), (2, -2 / 3), (3, 5 / 16), (4, 41 / 180), (5, -127 / 288), (6, 7891 / 37800)],
    [(2, 13 / 48), (3, -3 / 5), (4, 557 / 1440), (5, 281 / 630), (6, -1983433 / 1935360)],
    [(3, 61 / 240), (4, -103 / 140), (5, 15061 / 26880), (6, 167603 / 181440)],
    [(4, 49561 / 161280), (5, -179 / 168), (6, 6601661 / 7257600)],
    [(5, 34729 / 80640), (6, -3418889 / 1995840)],
    [(6, 212378941 / 319334400)],
])
_BETA = _series([
    [(1, 1 / 2), (2, -2 / 3), (3, 37 / 96), (4, -1 / 360), (5, -81 / 512), (6, 96199 / 604800)],
    [(2, 1 / 48), (3, 1 / 15), (4, -437 / 1440), (5, 46 / 105), (6, -1118711 / 3870720)],
    [(3, 17 / 480), (4, -37 / 840), (5, -209 / 4480), (6, 5569 / 90720)],
    [(4, 4397 / 161280), (5, -11 / 504), (6, -830251 / 7257600)],
    [(5, 4583 / 161280), (6, -108847 / 3991680)],
    [(6, 20648693 / 638668800)],
])
_J2 = 2.0 * np.arange(1, 7)

_BANDS = "CDEFGHJKLMNPQRSTUVWX"


@dataclass(frozen=True)
class GeoPoint:
    """Geographic position on the WGS84 ellipsoid (degrees, metres)."""

    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        lat, lon = float(self.latitude), float(self.longitude)
        if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
            raise DomainError(f"latitude {lat} outside [-90, 90]")
        if not math.isfinite(lon):
            raise DomainError(f"longitude {lon} is not finite")
        object.__setattr__(self, "latitude", lat)
        object.__setattr__(self, "longitude", normalize_longitude(lon))
        object.__setattr__(self, "altitude", float(self.altitude))


@dataclass(frozen=True)
class UtmCoord:
    zone: int
    south: bool
    easting: float
    northing: float
    altitude: float = 0.0
    band: str = field(default="", compare=False)  # latitude band letter, informational

    def __post_init__(self):
        if not 1 <= int(self.zone) <= 60:
            raise DomainError(f"UTM zone {self.zone} outside 1..60")
        object.__setattr__(self, "zone", int(self.zone))

    @property
    def label(self) -> str:
        """Zone designator for display, e.g. ``32U``."""
        if self.band:
            return f"{self.zone}{self.band}"
        return f"{self.zone}{'S' if self.south else 'N'}"


@dataclass(frozen=True)
class LocalFrame:
    """Cartesian working frame: UTM grid axes translated to ``origin``.

    Local coordinates are small, so they survive float32 storage with
    millimetre fidelity where absolute northings (~6e6 m) would not.
    """

    origin: UtmCoord
    description: str = ""


def normalize_longitude(lon):
    """Map longitudes into (-180, 180]."""
    lon = np.asarray(lon, dtype=float)
    out = lon - 360.0 * np.ceil((lon - 180.0) / 360.0)
    if out.ndim == 0:
        return float(out)
    return out


def natural_zone(lon) -> int:
    lon = normalize_longitude(lon)
    zone = int(math.floor((lon + 180.0) / 6.0)) + 1
    return min(zone, 60)


def central_meridian(zone: int) -> float:
    return 6.0 * zone - 183.0


def latitude_band(lat: float) -> str:
    if lat < -80.0 or lat > 84.0:
        return ""
    idx = int(math.floor((lat + 80.0) / 8.0))
    return _BANDS[min(idx, len(_BANDS) - 1)]


def _zone_distance(a: int, b: int) -> int:
    d = abs(a - b) % 60
    return min(d, 60 - d)


def _conformal_tau(tau):
    # tan of conformal latitude from tan of geodetic latitude
    sig = np.sinh(_E * np.arctanh(_E * tau / np.sqrt(1.0 + tau * tau)))
    return tau * np.sqrt(1.0 + sig * sig) - sig * np.sqrt(1.0 + tau * tau)


def _geodetic_tau(taup):
    # Newton inversion of _conformal_tau (Karney 2011, eq. 19-21)
    tau = taup / (1.0 - _E2)
    for _ in range(8):
        tp = _conformal_tau(tau)
        dtau = (
            (taup - tp)
            * (1.0 + (1.0 - _E2) * tau * tau)
            / ((1.0 - _E2) * np.sqrt((1.0 + tp * tp) * (1.0 + tau * tau)))
        )
        tau = tau + dtau
        if np.all(np.abs(dtau) <= 1e-15 * np.maximum(1.0, np.abs(tau))):
            break
    return tau


def _forward_terms(lat, dlon):
    phi = np.radians(lat)
    lam = np.radians(dlon)
    taup = _conformal_tau(np.tan(phi))
    xip = np.arctan2(taup, np.cos(lam))
    etap = np.arcsinh(np.sin(lam) / np.sqrt(taup * taup + np.cos(lam) ** 2))
    return taup, lam, xip, etap


def geographic_to_grid(lat, lon, zone: int, south: bool = False):
    """Project latitude/longitude (degrees) onto the grid of ``zone``.

    Returns ``(easting, northing)`` arrays in metres.
    """
    lat = np.asarray(lat, dtype=float)
    dlon = normalize_longitude(np.asarray(lon, dtype=float) - central_meridian(zone))
    _, _, xip, etap = _forward_terms(lat, dlon)
    xip_ = xip[..., None]
    etap_ = etap[..., None]
    xi = xip + np.sum(_ALPHA * np.sin(_J2 * xip_) * np.cosh(_J2 * etap_), axis=-1)
    eta = etap + np.sum(_ALPHA * np.cos(_J2 * xip_) * np.sinh(_J2 * etap_), axis=-1)
    easting = FALSE_EASTING + UTM_K0 * _A_RECT * eta
    northing = UTM_K0 * _A_RECT * xi
    if south:
        northing = northing + FALSE_NORTHING_SOUTH
    return easting, northing


def grid_to_geographic(easting, northing, zone: int, south: bool = False):
    """Inverse of :func:`geographic_to_grid`; returns ``(lat, lon)`` in degrees."""
    easting = np.asarray(easting, dtype=float)
    northing = np.asarray(northing, dtype=float)
    if south:
        northing = northing - FALSE_NORTHING_SOUTH
    xi = northing / (UTM_K0 * _A_RECT)
    eta = (easting - FALSE_EASTING) / (UTM_K0 * _A_RECT)
    xi_ = xi[..., None]
    eta_ = eta[..., None]
    xip = xi - np.sum(_BETA * np.sin(_J2 * xi_) * np.cosh(_J2 * eta_), axis=-1)
    etap = eta - np.sum(_BETA * np.cos(_J2 * xi_) * np.sinh(_J2 * eta_), axis=-1)
    taup = np.sin(xip) / np.sqrt(np.sinh(etap) ** 2 + np.cos(xip) ** 2)
    lam = np.arctan2(np.sinh(etap), np.cos(xip))
    lat = np.degrees(np.arctan(_geodetic_tau(taup)))
    lon = normalize_longitude(central_meridian(zone) + np.degrees(lam))
    return lat, lon


def meridian_convergence(lat, lon, zone: int | None = None):
    """Angle (degrees) from true north to grid north, positive east of the central meridian."""
    if zone is None:
        zone = natural_zone(float(np.ravel(lon)[0]))
    lat = np.asarray(lat, dtype=float)
    dlon = normalize_longitude(np.asarray(lon, dtype=float) - central_meridian(zone))
    taup, lam, xip, etap = _forward_terms(lat, dlon)
    xip_ = xip[..., None]
    etap_ = etap[..., None]
    p = 1.0 + np.sum(_J2 * _ALPHA * np.cos(_J2 * xip_) * np.cosh(_J2 * etap_), axis=-1)
    q = np.sum(_J2 * _ALPHA * np.sin(_J2 * xip_) * np.sinh(_J2 * etap_), axis=-1)
    gamma_sphere = np.arctan2(taup * np.tan(lam), np.sqrt(1.0 + taup * taup))
    return np.degrees(gamma_sphere + np.arctan2(q, p))


def wgs84_to_utm(p: GeoPoint, forced_zone: int | None = None) -> UtmCoord:
    """Project a geographic point into UTM.

    ``forced_zone`` pins the projection to a neighbouring zone so that a
    dataset straddling a boundary stays on one grid.
    """
    if not -80.0 <= p.latitude <= 84.0:
        raise DomainError(f"latitude {p.latitude} outside the UTM range [-80, 84]")
    zone = natural_zone(p.longitude)
    if forced_zone is not None:
        if not 1 <= forced_zone <= 60:
            raise DomainError(f"forced zone {forced_zone} outside 1..60")
        if _zone_distance(forced_zone, zone) > 1:
            raise DomainError(f"forced zone {forced_zone} is more than one zone from natural zone {zone}")
        zone = int(forced_zone)
    south = p.latitude < 0.0
    e, n = geographic_to_grid(p.latitude, p.longitude, zone, south)
    return UtmCoord(zone, south, float(e), float(n), p.altitude, latitude_band(p.latitude))


def utm_to_wgs84(c: UtmCoord) -> GeoPoint:
    if not (math.isfinite(c.easting) and 0.0 <= c.easting <= 1000000.0):
        raise DomainError(f"easting {c.easting} out of range")
    if not (math.isfinite(c.northing) and 0.0 <= c.northing <= 10000000.0):
        raise DomainError(f"northing {c.northing} out of range")
    lat, lon = grid_to_geographic(c.easting, c.northing, c.zone, c.south)
    return GeoPoint(float(lat), float(lon), c.altitude)


def _check_same_grid(c: UtmCoord, f: LocalFrame):
    if c.zone != f.origin.zone or c.south != f.origin.south:
        raise DomainError(
            f"coordinate in zone {c.label} cannot be expressed in frame anchored in {f.origin.label}"
        )


def to_local(c: UtmCoord, f: LocalFrame) -> np.ndarray:
    _check_same_grid(c, f)
    o = f.origin
    return np.array([c.easting - o.easting, c.northing - o.northing, c.altitude - o.altitude])


def from_local(v, f: LocalFrame) -> UtmCoord:
    o = f.origin
    x, y, z = (float(a) for a in v)
    return UtmCoord(o.zone, o.south, x + o.easting, y + o.northing, z + o.altitude, o.band)


def geographic_to_local(lat, lon, alt, frame: LocalFrame) -> np.ndarray:
    """Bulk conversion of geographic arrays to ``(n, 3)`` local coordinates."""
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    alt = np.broadcast_to(np.asarray(alt, dtype=float), lat.shape)
    if np.any(np.abs(lat) > 84.0) or np.any(lat < -80.0):
        raise DomainError("latitude outside the UTM range")
    o = frame.origin
    far = [z for z in {natural_zone(v) for v in np.unique(lon)} if _zone_distance(z, o.zone) > 1]
    if far:
        raise DomainError(f"points in zone(s) {sorted(far)} cannot be mapped into zone {o.zone}")
    e, n = geographic_to_grid(lat, lon, o.zone, o.south)
    return np.column_stack([e - o.easting, n - o.northing, alt - o.altitude])


def local_to_geographic(xyz, frame: LocalFrame):
    """Inverse of :func:`geographic_to_local`; returns ``(lat, lon, alt)`` arrays."""
    xyz = np.atleast_2d(np.asarray(xyz, dtype=float))
    o = frame.origin
    lat, lon = grid_to_geographic(xyz[:, 0] + o.easting, xyz[:, 1] + o.northing, o.zone, o.south)
    return lat, lon, xyz[:, 2] + o.altitude
