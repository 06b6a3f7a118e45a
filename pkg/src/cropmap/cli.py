"""Command-line interface.

Exit status: 0 success (warnings allowed), 2 input/schema error,
3 precondition or domain violation, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import biomass, formats
from .biomass import REFERENCE_LINEAR, REFERENCE_QUADRATIC, Sample, fit_poly, predict
from .cloud import PLANT, assemble, estimate_ground, segment, voxel_downsample
from .config import RunConfig, dumps_config, load_config
from .errors import DomainError, PreconditionError, SchemaError
from .fieldsim import simulate_field
from .geodesy import GeoPoint, LocalFrame, UtmCoord, wgs84_to_utm
from .parcels import LoadReport, batch_metrics, load_boundaries, load_cut_areas
from .pose import TrackReport, estimate_track
from .report import build_report, join_samples

log = logging.getLogger("cropmap")

EXIT_OK, EXIT_SCHEMA, EXIT_PRECONDITION, EXIT_IO = 0, 2, 3, 4

METHODS = {"voxel": "voxel_occupancy", "column": "column_height"}
BUILTIN_MODELS = {"reference-linear": REFERENCE_LINEAR, "reference-quadratic": REFERENCE_QUADRATIC}


def _json(path, obj):
    formats.atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, out_dir, seed: int | None = None, workers: int = 1) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg.sim
    seed = sim.seed if seed is None else seed
    rig = cfg.rig.build()
    f = sim.field_spec()
    b = simulate_field(f, sim.trajectory(rig), cfg.lidar.build(), rig, seed, sim.scan_options(workers),
                       sim.n_cut_areas, sim.biomass_noise_sigma_kg_ha)
    formats.write_imu(out / "imu.csv", b.imu)
    formats.write_gnss(out / "gnss.csv", b.gnss)
    formats.write_scans(out / "scans.bin", b.scans)
    formats.write_corners(out / "corners.csv", [(p.id, p.corners) for p in b.parcel_truth])
    formats.write_csv(out / "truth.csv", formats.TRUTH_HEADER,
                      [(p.id, p.height, p.footprint, p.volume, p.e_v) for p in b.parcel_truth])
    formats.write_cut_corners(out / "cut_corners.csv", [(c.id, c.parcel_id, c.corners) for c in b.cut_truth])
    formats.write_csv(out / "cut_truth.csv", formats.CUT_TRUTH_HEADER,
                      [(c.id, c.parcel_id, c.volume, c.e_v, c.biomass) for c in b.cut_truth])
    formats.write_samples(out / "samples.csv", [(c.id, None, c.biomass) for c in b.cut_truth])
    summary = {"seed": seed, "n_parcels": len(b.parcel_truth), "n_cut_areas": len(b.cut_truth),
               "n_scans": len(b.scans), "n_returns": int(sum(len(s) for s in b.scans)),
               "n_imu": len(b.imu), "n_gnss": len(b.gnss)}
    log.info("simulated %s", summary)
    return summary


def _origin_from_gnss(gnss, accept) -> LocalFrame:
    ok = np.isin(gnss.quality, list(accept))
    if not ok.any():
        raise PreconditionError("no usable GNSS fix to anchor the local frame")
    i = int(np.argmax(ok))
    u = wgs84_to_utm(GeoPoint(gnss.lat[i], gnss.lon[i], gnss.alt[i]))
    return LocalFrame(UtmCoord(u.zone, u.south, math.floor(u.easting), math.floor(u.northing),
                               math.floor(u.altitude), u.band), "first GNSS fix")


def cmd_map(cfg: RunConfig, in_dir, out_cloud, workers: int = 1) -> dict:
    src = Path(in_dir)
    imu = formats.read_imu(src / "imu.csv")
    gnss = formats.read_gnss(src / "gnss.csv")
    scans = formats.read_scans(src / "scans.bin")
    rig = cfg.rig.build()
    spec = cfg.lidar.build()
    fusion = cfg.fusion.build()
    frame = cfg.cloud.frame() or _origin_from_gnss(gnss, fusion.accept_quality)
    report = TrackReport()
    track = estimate_track(imu, gnss, rig, frame, fusion, report)
    for s in scans:
        s.validate(spec)
    cloud = assemble(scans, track, rig, spec, frame, workers)
    st = cloud.stats
    if scans and st["n_skipped"] == st["n_scans"]:
        raise PreconditionError("pose track does not overlap any scan")
    if not scans:
        log.warning("scan file holds no sweeps; writing an empty cloud")
    cloud = voxel_downsample(cloud, cfg.cloud.voxel_leaf_m)
    formats.write_ply(out_cloud, cloud)
    summary = {
        "n_scans": st["n_scans"], "n_scans_skipped": st["n_skipped"], "n_returns_outside_track": st["n_outside"],
        "n_returns_degraded_pose": st["n_degraded"], "n_points": len(cloud), "n_poses": report.n_poses,
        "n_poses_degraded": report.n_degraded, "n_course_updates": report.n_course_updates,
        "n_fixes_used": report.n_fixes_used, "n_fixes_rejected": report.n_fixes_rejected,
        "gyro_bias_deg_s": math.degrees(report.final_bias),
    }
    _json(str(out_cloud) + ".log.json", summary)
    if st["n_skipped"]:
        log.warning("%d scans skipped (outside the pose track)", st["n_skipped"])
    log.info("mapped %s", summary)
    return summary


def _is_cut_file(path) -> bool:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline()
    return "parcel_id" in [h.strip() for h in head.split(",")]


def cmd_volume(cfg: RunConfig, cloud_path, corners_path, out_csv, method: str | None = None,
               workers: int = 1) -> dict:
    cloud = formats.read_ply(cloud_path)
    frame = cloud.frame or cfg.cloud.frame()
    if frame is None:
        raise PreconditionError("cloud has no origin metadata and the config sets none")
    rep = LoadReport()
    if _is_cut_file(corners_path):
        areas = load_cut_areas([(i, p, c, None) for i, p, c in formats.read_cut_corners(corners_path)], frame, rep)
    else:
        areas = load_boundaries(formats.read_corners(corners_path), frame, rep)
    for rid, msg in rep.errors:
        log.warning("boundary %s skipped: %s", rid, msg)
    vcfg = cfg.parcels.build()
    if method is not None:
        vcfg = type(vcfg)(vcfg.leaf, METHODS.get(method, method), vcfg.column_stat, vcfg.unobserved,
                          vcfg.invalid_threshold, vcfg.cut_min_plant_points)
    ground = estimate_ground(cloud, opts=cfg.cloud.ground())
    labelled = segment(cloud, ground, cfg.cloud.plant_height_threshold_m)
    failures = []
    metrics = batch_metrics(labelled, areas, ground, vcfg, failures, workers) if areas else []
    for rid, msg in failures:
        log.warning("metrics for %s failed: %s", rid, msg)
    formats.write_metrics(out_csv, metrics)
    n_records = len(areas) + len(rep.errors)
    if n_records and not metrics:
        raise PreconditionError("no boundary produced metrics")
    summary = {"n_boundaries": len(areas), "n_rejected": len(rep.errors), "n_failed": len(failures),
               "n_plant_points": int(np.sum(labelled.labels == PLANT)), "method": vcfg.method,
               "ground_invalid_fraction": ground.invalid_fraction}
    log.info("volume %s", summary)
    return summary


def _samples_with_ev(samples_path, metrics_path=None):
    raw = formats.read_samples(samples_path)
    ev = {}
    if metrics_path is not None:
        ev = {m["id"]: m["e_v_m3_per_ha"] for m in formats.read_metrics(metrics_path)}
    out = []
    for row, (sid, e, b) in enumerate(raw, start=2):
        if e is None:
            e = ev.get(sid)
        if e is None:
            raise SchemaError(f"sample {sid!r} has no e_v (pass --metrics)", row=row, column="e_v_m3_ha")
        out.append(Sample(e, b, sid))
    return out


def cmd_fit(samples_csv, order: int, out_model, metrics_csv=None) -> dict:
    samples = _samples_with_ev(samples_csv, metrics_csv)
    rep = fit_poly(samples, order)
    formats.atomic_write(out_model, biomass.dumps_model(rep.model, rep.r_squared, rep.n))
    summary = {"order": order, "coefficients": list(rep.model.coefficients), "r_squared": rep.r_squared,
               "n": rep.n, "n_low_biomass": rep.n_low_biomass}
    log.info("fit %s", summary)
    return summary


def load_model(spec: str):
    if spec in BUILTIN_MODELS:
        return BUILTIN_MODELS[spec]
    return biomass.loads_model(Path(spec).read_text(encoding="utf-8"))


def cmd_predict(model_spec: str, e_v) -> str:
    m = load_model(model_spec)
    vals = []
    for v in e_v:
        try:
            x = float(v)
        except ValueError:
            raise SchemaError(f"e_v is not a number: {v!r}") from None
        if not math.isfinite(x):
            raise SchemaError(f"e_v is not finite: {v!r}")
        vals.append(x)
    rows = [(x, predict(m, x)) for x in vals]
    return formats.csv_text(["e_v_m3_ha", "biomass_kg_ha"], rows)


def cmd_report(metrics_csv, samples_csv, model_spec, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = formats.read_metrics(metrics_csv) if metrics_csv else []
    rows, missing = join_samples(metrics, formats.read_samples(samples_csv))
    for sid in missing:
        log.warning("sample %s has no matching metrics row", sid)
    model = load_model(model_spec) if model_spec else None
    summary = build_report(rows, model, out)
    summary["n_unmatched"] = len(missing)
    return summary


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cropmap", description="LiDAR crop canopy volume and biomass mapping")
    p.add_argument("--verbose", "-v", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False, workers=False):
        sp.add_argument("--config", help="run configuration (JSON)")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides sim.seed")
        if workers:
            sp.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")

    s = sub.add_parser("simulate", help="simulate a field drive and write sensor logs")
    common(s, seed=True, workers=True)
    s.add_argument("out_dir")

    s = sub.add_parser("map", help="fuse poses and assemble the point cloud")
    common(s, workers=True)
    s.add_argument("in_dir")
    s.add_argument("out_cloud")

    s = sub.add_parser("volume", help="per-parcel canopy volume from a cloud and corner file")
    common(s, workers=True)
    s.add_argument("cloud")
    s.add_argument("corners")
    s.add_argument("out_csv")
    s.add_argument("--method", choices=sorted(METHODS), help="overrides parcels.method")

    s = sub.add_parser("fit", help="fit a biomass model to samples")
    s.add_argument("samples")
    s.add_argument("out_model")
    s.add_argument("--order", type=int, choices=(1, 2), default=1)
    s.add_argument("--metrics", help="metrics CSV supplying e_v for samples without one")

    s = sub.add_parser("predict", help="predict biomass for e_v values")
    s.add_argument("--model", required=True, help="model JSON or reference-linear / reference-quadratic")
    s.add_argument("e_v", nargs="+")

    s = sub.add_parser("report", help="scatter plot and fit summary")
    s.add_argument("samples")
    s.add_argument("out_dir")
    s.add_argument("--metrics")
    s.add_argument("--model", help="model JSON or reference-linear / reference-quadratic")

    s = sub.add_parser("default-config", help="print the default configuration")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "default-config":
            sys.stdout.write(dumps_config(RunConfig()))
        elif args.command == "simulate":
            cmd_simulate(load_config(args.config), args.out_dir, args.seed, args.workers)
        elif args.command == "map":
            cmd_map(load_config(args.config), args.in_dir, args.out_cloud, args.workers)
        elif args.command == "volume":
            cmd_volume(load_config(args.config), args.cloud, args.corners, args.out_csv, args.method, args.workers)
        elif args.command == "fit":
            cmd_fit(args.samples, args.order, args.out_model, args.metrics)
        elif args.command == "predict":
            sys.stdout.write(cmd_predict(args.model, args.e_v))
        elif args.command == "report":
            cmd_report(args.metrics, args.samples, args.model, args.out_dir)
    except SchemaError as e:
        log.error("%s", e)
        return EXIT_SCHEMA
    except (PreconditionError, DomainError) as e:
        log.error("%s", e)
        return EXIT_PRECONDITION
    except OSError as e:
        log.error("%s", e)
        return EXIT_IO
    return EXIT_OK


def main():
    sys.exit(run())
