import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from cropmap import cli, formats
from cropmap.config import RunConfig, dumps_config, load_config
from cropmap.errors import SchemaError

SMALL = {
    "sim": {"seed": 3, "parcel_rows": 1, "parcel_cols": 2, "lead_in_m": 2.0, "scan_stride": 4, "n_cut_areas": 2,
            "canopy_heights_m": [0.4, 0.55]},
    "parcels": {"method": "column_height"},
}


def _write_cfg(path, d):
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = _write_cfg(d / "cfg.json", SMALL)
    assert cli.run(["simulate", "--config", cfg, str(d / "out")]) == 0
    return d


@pytest.fixture(scope="module")
def cloud_path(sim_dir):
    cfg = str(sim_dir / "cfg.json")
    out = sim_dir / "cloud.ply"
    assert cli.run(["map", "--config", cfg, str(sim_dir / "out"), str(out)]) == 0
    return out


# config


def test_default_config_round_trip(capsys):
    assert cli.run(["default-config"]) == 0
    text = capsys.readouterr().out
    cfg = RunConfig.from_dict(json.loads(text))
    assert dumps_config(cfg) == text
    assert cfg.rig.lever_arm_m == 2.5 and cfg.parcels.column_stat == "top"


@pytest.mark.parametrize("doc", [{"rig": {"lever_arm": 2.0}}, {"camera": {}}, {"rig": []}, [1]])
def test_config_rejects_unknown(tmp_path, doc):
    with pytest.raises(SchemaError):
        load_config(_write_cfg(tmp_path / "c.json", doc))
    assert cli.run(["simulate", "--config", str(tmp_path / "c.json"), str(tmp_path / "o")]) == 2


def test_config_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{oops")
    assert cli.run(["simulate", "--config", str(p), str(tmp_path / "o")]) == 2


# simulate


def test_simulate_outputs(sim_dir):
    out = sim_dir / "out"
    for name in ("imu.csv", "gnss.csv", "scans.bin", "corners.csv", "truth.csv", "samples.csv", "cut_corners.csv",
                 "cut_truth.csv"):
        assert (out / name).stat().st_size > 0
    truth = formats.read_csv(out / "truth.csv", formats.TRUTH_HEADER)
    assert len(truth) == 2
    assert float(truth[0][1]["e_v_m3_ha"]) == pytest.approx(4000.0)
    samples = formats.read_samples(out / "samples.csv")
    assert len(samples) == 2 and all(e is None for _, e, _ in samples)


def test_simulate_deterministic(sim_dir, tmp_path):
    assert cli.run(["simulate", "--config", str(sim_dir / "cfg.json"), "--workers", "2", str(tmp_path)]) == 0
    for f in (sim_dir / "out").iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name


def test_simulate_seed_flag_changes_output(sim_dir, tmp_path):
    assert cli.run(["simulate", "--config", str(sim_dir / "cfg.json"), "--seed", "4", str(tmp_path)]) == 0
    assert (tmp_path / "gnss.csv").read_bytes() != (sim_dir / "out" / "gnss.csv").read_bytes()


def test_simulate_zero_canopy(tmp_path):
    d = json.loads(json.dumps(SMALL))
    d["sim"]["canopy_heights_m"] = [0.0, 0.0]
    d["sim"]["scan_stride"] = 50
    cfg = _write_cfg(tmp_path / "c.json", d)
    assert cli.run(["simulate", "--config", cfg, str(tmp_path / "o")]) == 0
    rows = formats.read_csv(tmp_path / "o" / "truth.csv", formats.TRUTH_HEADER)
    assert all(float(r["volume_m3"]) == 0.0 for _, r in rows)


def test_simulate_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.run(["simulate", "--config", _write_cfg(tmp_path / "c.json", SMALL), str(blocker / "sub")]) == 4


# map


def test_map_cloud(sim_dir, cloud_path):
    c = formats.read_ply(cloud_path)
    assert len(c) > 10_000
    assert c.frame is not None and c.frame.origin.zone == 32
    log = json.loads((sim_dir / "cloud.ply.log.json").read_text())
    assert log["n_scans_skipped"] == 0 and log["n_points"] == len(c)
    # bounding box within the field extent plus margin, in the simulator's frame
    cfg = load_config(sim_dir / "cfg.json")
    f = cfg.sim.field_spec()
    off = np.array([c.frame.origin.easting - f.origin.easting, c.frame.origin.northing - f.origin.northing])
    xy = c.points[:, :2].astype(float) + off
    w, h = f.extent
    pad = f.margin + 5 * cfg.lidar.range_sigma_m  # edge returns pushed outward by range noise
    assert xy.min(axis=0)[0] >= -pad and xy.max(axis=0)[0] <= w + pad
    assert xy.min(axis=0)[1] >= -pad and xy.max(axis=0)[1] <= h + pad


def test_map_empty_scans(sim_dir, tmp_path, caplog):
    src = tmp_path / "in"
    src.mkdir()
    for name in ("imu.csv", "gnss.csv"):
        (src / name).write_bytes((sim_dir / "out" / name).read_bytes())
    (src / "scans.bin").write_bytes(b"CMSCAN01")
    with caplog.at_level("WARNING", logger="cropmap"):
        assert cli.run(["map", str(src), str(tmp_path / "c.ply")]) == 0
    assert len(formats.read_ply(tmp_path / "c.ply")) == 0
    assert any("no sweeps" in r.message for r in caplog.records)


def test_map_no_overlap(sim_dir, tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    (src / "imu.csv").write_bytes((sim_dir / "out" / "imu.csv").read_bytes())
    (src / "gnss.csv").write_bytes((sim_dir / "out" / "gnss.csv").read_bytes())
    scans = formats.read_scans(sim_dir / "out" / "scans.bin")[:3]
    from cropmap.lidar import Scan

    late = [Scan(s.sweep_start + 1e4, s.t + 1e4, s.channel, s.azimuth, s.range) for s in scans]
    formats.write_scans(src / "scans.bin", late)
    assert cli.run(["map", str(src), str(tmp_path / "c.ply")]) == 3


def test_map_imu_gnss_disjoint(sim_dir, tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    imu = formats.read_imu(sim_dir / "out" / "imu.csv")
    imu.t = imu.t + 1e5
    formats.write_imu(src / "imu.csv", imu)
    (src / "gnss.csv").write_bytes((sim_dir / "out" / "gnss.csv").read_bytes())
    (src / "scans.bin").write_bytes(b"CMSCAN01")
    assert cli.run(["map", str(src), str(tmp_path / "c.ply")]) == 3


def test_map_missing_input(tmp_path):
    assert cli.run(["map", str(tmp_path / "nope"), str(tmp_path / "c.ply")]) == 4


def test_map_bad_scan_file(sim_dir, tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    for name in ("imu.csv", "gnss.csv"):
        (src / name).write_bytes((sim_dir / "out" / name).read_bytes())
    (src / "scans.bin").write_bytes(b"garbage!")
    assert cli.run(["map", str(src), str(tmp_path / "c.ply")]) == 2


# volume


def test_volume_rows_and_accuracy(sim_dir, cloud_path, tmp_path):
    out = tmp_path / "m.csv"
    assert cli.run(["volume", "--config", str(sim_dir / "cfg.json"), str(cloud_path),
                    str(sim_dir / "out" / "corners.csv"), str(out)]) == 0
    m = formats.read_metrics(out)
    truth = {r["id"]: float(r["e_v_m3_ha"]) for _, r in formats.read_csv(sim_dir / "out" / "truth.csv",
                                                                          formats.TRUTH_HEADER)}
    assert [r["id"] for r in m] == sorted(truth)
    for r in m:
        assert r["method"] == "column_height"
        assert abs(r["e_v_m3_per_ha"] / truth[r["id"]] - 1) < 0.15


def test_volume_method_flag(sim_dir, cloud_path, tmp_path):
    out = tmp_path / "m.csv"
    assert cli.run(["volume", "--method", "voxel", str(cloud_path), str(sim_dir / "out" / "corners.csv"),
                    str(out)]) == 0
    assert {r["method"] for r in formats.read_metrics(out)} == {"voxel_occupancy"}


def test_volume_cut_areas(sim_dir, cloud_path, tmp_path):
    out = tmp_path / "m.csv"
    assert cli.run(["volume", "--config", str(sim_dir / "cfg.json"), str(cloud_path),
                    str(sim_dir / "out" / "cut_corners.csv"), str(out)]) == 0
    ids = [r["id"] for r in formats.read_metrics(out)]
    assert ids and all(i.endswith("-cut") for i in ids)


def test_volume_empty_corners(cloud_path, tmp_path):
    corners = tmp_path / "c.csv"
    corners.write_text(",".join(formats.CORNER_HEADER) + "\n")
    out = tmp_path / "m.csv"
    assert cli.run(["volume", str(cloud_path), str(corners), str(out)]) == 0
    assert out.read_text() == ",".join(formats.METRICS_HEADER) + "\n"


def test_volume_duplicate_ids(sim_dir, cloud_path, tmp_path, caplog):
    lines = (sim_dir / "out" / "corners.csv").read_text().splitlines()
    corners = tmp_path / "c.csv"
    corners.write_text("\n".join([lines[0], lines[1], lines[1]]) + "\n")
    with caplog.at_level("ERROR", logger="cropmap"):
        assert cli.run(["volume", str(cloud_path), str(corners), str(tmp_path / "m.csv")]) == 3
    assert any("P1-01" in r.message for r in caplog.records)


def test_volume_all_records_bad(cloud_path, tmp_path):
    corners = tmp_path / "c.csv"
    corners.write_text(",".join(formats.CORNER_HEADER) + "\nA,55.3,11.38,55.3,11.38,,,,\n")
    assert cli.run(["volume", str(cloud_path), str(corners), str(tmp_path / "m.csv")]) == 3


def test_volume_schema_error(cloud_path, tmp_path):
    corners = tmp_path / "c.csv"
    corners.write_text("name,lat1\nA,55\n")
    assert cli.run(["volume", str(cloud_path), str(corners), str(tmp_path / "m.csv")]) == 2


# fit, predict, report


def test_fit_exact_line(tmp_path):
    s = tmp_path / "s.csv"
    formats.write_samples(s, [(f"x{k}", 3000.0 + 500 * k, 2 * (3000.0 + 500 * k) + 100) for k in range(6)])
    assert cli.run(["fit", str(s), str(tmp_path / "m.json")]) == 0
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["r_squared"] == pytest.approx(1.0, abs=1e-12) and d["n"] == 6
    assert d["coefficients"] == pytest.approx([100.0, 2.0], rel=1e-9)


def test_fit_joins_metrics(sim_dir, cloud_path, tmp_path):
    m = tmp_path / "m.csv"
    assert cli.run(["volume", "--config", str(sim_dir / "cfg.json"), str(cloud_path),
                    str(sim_dir / "out" / "cut_corners.csv"), str(m)]) == 0
    s = sim_dir / "out" / "samples.csv"
    assert cli.run(["fit", str(s), str(tmp_path / "model.json")]) == 2
    assert cli.run(["fit", "--metrics", str(m), str(s), str(tmp_path / "model.json")]) == 0


def test_fit_too_few_samples(tmp_path):
    s = tmp_path / "s.csv"
    formats.write_samples(s, [("a", 4000.0, 30000.0)])
    assert cli.run(["fit", str(s), str(tmp_path / "m.json"), "--order", "2"]) == 3


def test_predict_reference(capsys):
    assert cli.run(["predict", "--model", "reference-linear", "5000"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "e_v_m3_ha,biomass_kg_ha"
    e, b = lines[1].split(",")
    assert float(e) == 5000.0 and float(b) == pytest.approx(41046.896722, rel=1e-9)
    assert cli.run(["predict", "--model", "reference-quadratic", "5000"]) == 0
    assert float(capsys.readouterr().out.splitlines()[1].split(",")[1]) == pytest.approx(41896.24, rel=1e-9)


def test_predict_model_file_and_errors(tmp_path, capsys):
    s = tmp_path / "s.csv"
    formats.write_samples(s, [(f"x{k}", 1000.0 * k, 3.0 * k) for k in range(1, 5)])
    cli.run(["fit", str(s), str(tmp_path / "m.json")])
    capsys.readouterr()
    assert cli.run(["predict", "--model", str(tmp_path / "m.json"), "2000"]) == 0
    assert float(capsys.readouterr().out.splitlines()[1].split(",")[1]) == pytest.approx(6.0, rel=1e-9)
    assert cli.run(["predict", "--model", "reference-linear", "abc"]) == 2
    assert cli.run(["predict", "--model", "reference-linear", "nan"]) == 2
    assert cli.run(["predict", "--model", str(tmp_path / "missing.json"), "1"]) == 4


def test_report_svg_markers(tmp_path):
    s = tmp_path / "s.csv"
    rng = np.random.default_rng(0)
    ev = rng.uniform(3500, 6200, 17)
    formats.write_samples(s, [(f"c{k}", float(e), float(8.85 * e - 3205 + rng.normal(0, 3000)))
                              for k, e in enumerate(ev)])
    assert cli.run(["report", str(s), str(tmp_path / "r"), "--model", "reference-linear"]) == 0
    root = ET.parse(tmp_path / "r" / "scatter.svg").getroot()
    ns = {"svg": "http://www.w3.org/2000/svg"}
    group = root.find(".//svg:g[@id='samples']", ns)
    assert len(group.findall(".//svg:use", ns)) == 17
    assert root.find(".//svg:g[@id='model-1']", ns) is not None
    summary = json.loads((tmp_path / "r" / "fit_summary.json").read_text())
    assert summary["n"] == 17 and [f["order"] for f in summary["fits"]] == [1, 2]
    rows = formats.read_csv(tmp_path / "r" / "report.csv", ["id", "e_v_m3_ha", "biomass_kg_ha", "predicted_kg_ha",
                                                            "residual_kg_ha"])
    assert len(rows) == 17


def test_report_idempotent(tmp_path):
    s = tmp_path / "s.csv"
    formats.write_samples(s, [(f"c{k}", 3500.0 + 300 * k, 30000.0 + 2500 * k + (k % 3) * 900) for k in range(9)])
    assert cli.run(["report", str(s), str(tmp_path / "a")]) == 0
    assert cli.run(["report", str(s), str(tmp_path / "b")]) == 0
    for name in ("scatter.svg", "report.csv", "fit_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        cli.run(["volume"])
    assert e.value.code == 2
