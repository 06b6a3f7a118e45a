"""Run configuration: one JSON document with a section per pipeline stage.

Every key carries its unit in its name (``_m``, ``_deg``, ``_s``, ``_hz``...).
Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .cloud import GroundOptions
from .errors import SchemaError
from .fieldsim import FIELD_REFERENCE, FieldSpec, ScanSimOptions, TrajectorySpec, calibrate_biomass_noise
from .geodesy import GeoPoint, LocalFrame, UtmCoord, wgs84_to_utm
from .lidar import LidarSpec
from .parcels import VolumeConfig
from .pose import FusionConfig, ProcessNoise, RigConfig, RigidTransform

rad = math.radians


@dataclass
class RigSection:
    lever_arm_m: float = 2.5
    antenna_height_m: float = 2.2
    mount_roll_deg: float = 0.0
    mount_pitch_deg: float = 90.0
    mount_yaw_deg: float = 0.0
    mount_offset_m: list = field(default_factory=lambda: [0.0, 0.0, -0.2])

    def build(self) -> RigConfig:
        mount = RigidTransform.from_euler(rad(self.mount_roll_deg), rad(self.mount_pitch_deg),
                                          rad(self.mount_yaw_deg), self.mount_offset_m)
        return RigConfig(self.lever_arm_m, mount, self.antenna_height_m)


@dataclass
class LidarSection:
    channel_elevations_deg: list = field(default_factory=lambda: [-15.0 + 2.0 * k for k in range(16)])
    azimuth_step_deg: float = 0.2
    range_sigma_m: float = 0.03
    min_range_m: float = 0.5
    max_range_m: float = 100.0
    sweep_period_s: float = 0.1

    def build(self) -> LidarSpec:
        return LidarSpec(tuple(rad(e) for e in self.channel_elevations_deg), rad(self.azimuth_step_deg),
                         self.range_sigma_m, self.min_range_m, self.max_range_m, self.sweep_period_s)


@dataclass
class FusionSection:
    gyro_noise_deg_s_rthz: float = 0.1
    bias_walk_deg_s_rts: float = 0.01
    gnss_sigma_m: float = 0.015
    course_baseline_s: float = 0.5
    course_sigma_floor_deg: float = 0.5
    min_speed_m_s: float = 0.3
    max_gap_s: float = 0.5
    init_yaw_sigma_deg: float = 10.0
    init_bias_sigma_deg_s: float = 1.0
    accept_quality: list = field(default_factory=lambda: ["fixed", "float"])

    def build(self) -> FusionConfig:
        return FusionConfig(
            ProcessNoise(rad(self.gyro_noise_deg_s_rthz), rad(self.bias_walk_deg_s_rts)),
            self.gnss_sigma_m, self.course_baseline_s, rad(self.course_sigma_floor_deg) ** 2,
            self.min_speed_m_s, self.max_gap_s, rad(self.init_yaw_sigma_deg), rad(self.init_bias_sigma_deg_s),
            tuple(self.accept_quality))


@dataclass
class CloudSection:
    # frame origin; when unset it is taken from the first usable GNSS fix, floored to whole metres
    origin_zone: int | None = None
    origin_south: bool = False
    origin_easting_m: float | None = None
    origin_northing_m: float | None = None
    origin_alt_m: float | None = None
    voxel_leaf_m: float = 0.05
    ground_cell_m: float = 0.25
    ground_percentile: float = 0.05
    ground_min_count: int = 5
    ground_reject_window_m: float = 12.0
    ground_max_step_m: float = 0.15
    ground_max_spread_m: float = 0.10
    ground_refine_band_m: float = 0.10
    ground_refine_iterations: int = 2
    ground_smooth: bool = True
    ground_fill_radius_m: float = 3.0
    plant_height_threshold_m: float = 0.10

    def frame(self) -> LocalFrame | None:
        vals = (self.origin_zone, self.origin_easting_m, self.origin_northing_m)
        if all(v is None for v in vals):
            return None
        if any(v is None for v in vals):
            raise SchemaError("origin_zone, origin_easting_m and origin_northing_m must be set together")
        return LocalFrame(UtmCoord(int(self.origin_zone), bool(self.origin_south), float(self.origin_easting_m),
                                   float(self.origin_northing_m), float(self.origin_alt_m or 0.0)))

    def ground(self) -> GroundOptions:
        return GroundOptions(self.ground_cell_m, self.ground_percentile, self.ground_min_count,
                             self.ground_reject_window_m, self.ground_max_step_m, self.ground_max_spread_m,
                             self.ground_refine_band_m, self.ground_refine_iterations, self.ground_smooth,
                             self.ground_fill_radius_m)


@dataclass
class ParcelsSection:
    volume_leaf_m: float = 0.05
    method: str = "voxel_occupancy"
    column_stat: str = "top"
    unobserved: str = "scale"
    invalid_ground_threshold: float = 0.2
    cut_min_plant_points: int = 50

    def build(self) -> VolumeConfig:
        return VolumeConfig(self.volume_leaf_m, self.method, self.column_stat, self.unobserved,
                            self.invalid_ground_threshold, self.cut_min_plant_points)


@dataclass
class BiomassSection:
    order: int = 1


@dataclass
class SimSection:
    seed: int = 0
    origin_lat_deg: float = FIELD_REFERENCE.latitude
    origin_lon_deg: float = FIELD_REFERENCE.longitude
    origin_alt_m: float = FIELD_REFERENCE.altitude
    parcel_rows: int = 4
    parcel_cols: int = 21
    parcel_length_m: float = 8.0
    parcel_width_m: float = 2.28
    crop_row_spacing_m: float = 0.12
    crop_rows_per_parcel: int = 19
    stripe_width_m: float = 0.12
    gap_x_m: float = 1.0
    gap_y_m: float = 1.0
    canopy_heights_m: list | None = None
    canopy_height_range_m: list = field(default_factory=lambda: [0.35, 0.62])
    soil_coeffs: list = field(default_factory=lambda: [0.0, 0.008, -0.004, 2e-5, 0.0, -1e-5])
    margin_m: float = 6.0
    speed_m_s: float = 1.0
    imu_rate_hz: float = 100.0
    gnss_rate_hz: float = 10.0
    start_time_s: float = 1179482418.0
    hold_time_s: float = 0.0
    lead_in_m: float = 8.0
    side_offset_m: float = 1.5
    over_every: int = 4
    gyro_bias_deg_s: float = 0.5
    gyro_noise_deg_s_rthz: float = 0.1
    gnss_sigma_h_m: float = 0.015
    gnss_sigma_v_m: float = 0.02
    gnss_outages_s: list = field(default_factory=list)
    heightfield_cell_m: float = 0.04
    march_step_m: float = 0.02
    scan_stride: int = 1
    n_cut_areas: int = 60
    biomass_noise_sigma_kg_ha: float = field(default_factory=lambda: calibrate_biomass_noise(0.55))

    def field_spec(self) -> FieldSpec:
        origin = wgs84_to_utm(GeoPoint(self.origin_lat_deg, self.origin_lon_deg, self.origin_alt_m))
        return FieldSpec(
            self.parcel_rows, self.parcel_cols, self.parcel_length_m, self.parcel_width_m, self.crop_row_spacing_m,
            self.crop_rows_per_parcel, self.stripe_width_m, self.gap_x_m, self.gap_y_m,
            tuple(self.canopy_heights_m) if self.canopy_heights_m is not None else None,
            tuple(self.canopy_height_range_m), tuple(self.soil_coeffs), self.margin_m, origin)

    def trajectory(self, rig: RigConfig) -> TrajectorySpec:
        return TrajectorySpec(
            self.speed_m_s, rig.antenna_height, self.imu_rate_hz, self.gnss_rate_hz, self.start_time_s,
            self.hold_time_s, self.lead_in_m, self.side_offset_m, self.over_every, None,
            rad(self.gyro_bias_deg_s), rad(self.gyro_noise_deg_s_rthz), 0.0, self.gnss_sigma_h_m,
            self.gnss_sigma_v_m, tuple(tuple(w) for w in self.gnss_outages_s))

    def scan_options(self, workers: int = 1) -> ScanSimOptions:
        return ScanSimOptions(self.heightfield_cell_m, self.march_step_m, 10, self.scan_stride, workers)


SECTIONS = {
    "rig": RigSection,
    "lidar": LidarSection,
    "fusion": FusionSection,
    "cloud": CloudSection,
    "parcels": ParcelsSection,
    "biomass": BiomassSection,
    "sim": SimSection,
}


@dataclass
class RunConfig:
    rig: RigSection = field(default_factory=RigSection)
    lidar: LidarSection = field(default_factory=LidarSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    cloud: CloudSection = field(default_factory=CloudSection)
    parcels: ParcelsSection = field(default_factory=ParcelsSection)
    biomass: BiomassSection = field(default_factory=BiomassSection)
    sim: SimSection = field(default_factory=SimSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise SchemaError("config must be a JSON object")
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise SchemaError(f"unknown config sections: {', '.join(unknown)}")
        parts = {}
        for name, sec in SECTIONS.items():
            body = d.get(name, {})
            if not isinstance(body, dict):
                raise SchemaError(f"section {name!r} must be an object")
            names = {f.name for f in dataclasses.fields(sec)}
            bad = sorted(set(body) - names)
            if bad:
                raise SchemaError(f"unknown keys in {name!r}: {', '.join(bad)}")
            try:
                parts[name] = sec(**body)
            except TypeError as e:
                raise SchemaError(f"section {name!r}: {e}") from None
        return cls(**parts)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"config is not valid JSON: {e}") from None
    return RunConfig.from_dict(d)


def dumps_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2) + "\n"
