import io
import json

import numpy as np
import pandas as pd
import pytest
from conftest import moved_copy, room_points
from rich.console import Console

import dicp_experiment
from dicp_components import (
    COMPONENT_MAP,
    IcpComponent,
    get_available_commands,
    get_component,
)
from dicp_components.config import write_json_document
from dicp_components.mask_weighting import load_mask
from dicp_components.pointcloud import (
    PointCloud,
    load_pointcloud_csv,
    save_pointcloud_csv,
)
from dicp_components.radar_extract import PolarScan, save_polar_scan
from dicp_components.se_geometry import Pose, planar_pose


@pytest.fixture
def console():
    return Console(file=io.StringIO(), width=120)


@pytest.fixture
def clouds(tmp_path):
    target = PointCloud(room_points())
    source = moved_copy(target, planar_pose(0.1, -0.05, 0.02))
    return (
        save_pointcloud_csv(source, tmp_path / "source.csv"),
        save_pointcloud_csv(target, tmp_path / "target.csv"),
    )


def test_component_registry():
    commands = ["extract", "icp", "grad-check", "train-mask", "eval"]
    assert get_available_commands() == commands
    assert isinstance(get_component("icp", {}), IcpComponent)
    assert get_component("lidar-map", {}) is None
    assert get_component("eval", {"icp": {}}).settings == {"icp": {}}
    assert set(commands) == set(COMPONENT_MAP)


def test_icp_writes_the_result(tmp_path, clouds, console):
    source, target = clouds
    out = tmp_path / "result.json"
    argv = ["icp", "--source", str(source), "--target", str(target), "--out", str(out)]
    code = dicp_experiment.run(argv, console)
    assert code == 0
    document = json.loads(out.read_text(encoding="utf-8"))
    assert document["converged"]
    pose = Pose.from_dict(document["pose"])
    assert pose.allclose(planar_pose(0.1, -0.05, 0.02), atol=1e-6)


def test_icp_honours_the_initial_pose_and_iteration_cap(tmp_path, clouds, console):
    source, target = clouds
    init = write_json_document(
        planar_pose(0.1, -0.05, 0.02).to_dict(), tmp_path / "init.json"
    )
    out = tmp_path / "result.json"
    argv = ["icp", "--source", str(source), "--target", str(target), "--out", str(out)]
    code = dicp_experiment.run(
        argv + ["--init", str(init), "--max-iterations", "1"], console
    )
    assert code == 0
    assert json.loads(out.read_text(encoding="utf-8"))["iterations_run"] == 1


def test_missing_input_is_a_data_error(tmp_path, clouds, console):
    _, target = clouds
    argv = [
        "icp",
        "--source",
        str(tmp_path / "absent.csv"),
        "--target",
        str(target),
        "--out",
        str(tmp_path / "result.json"),
    ]
    assert dicp_experiment.run(argv, console) == 3


def test_bad_config_is_a_config_error(tmp_path, clouds, console):
    source, target = clouds
    config = tmp_path / "config.json"
    config.write_text("{not json", encoding="utf-8")
    argv = ["icp", "--source", str(source), "--target", str(target), "--out", "r.json"]
    assert dicp_experiment.run(argv + ["--config", str(config)], console) == 2

    config.write_text(json.dumps({"icp": {"max_iterations": 0}}), encoding="utf-8")
    assert dicp_experiment.run(argv + ["--config", str(config)], console) == 2


def test_seed_is_required_for_sweeps(console):
    assert dicp_experiment.run(["eval", "--out", "report"], console) == 2
    assert dicp_experiment.run(["train-mask", "--out", "mask"], console) == 2


def test_extract_writes_detections(tmp_path, console):
    intensities = np.ones((8, 64))
    intensities[0, 30] = 100.0
    scan = save_polar_scan(
        PolarScan.uniform_azimuths(intensities, 0.5), tmp_path / "s.pscn"
    )
    out = tmp_path / "points.csv"
    argv = ["extract", "--scan", str(scan), "--a", "2", "--b", "5", "--out", str(out)]
    assert dicp_experiment.run(argv, console) == 0
    cloud = load_pointcloud_csv(out)
    np.testing.assert_allclose(cloud.points, [[15.25, 0.0]], atol=1e-9)


def test_grad_check_writes_a_report(tmp_path, clouds, console):
    source, target = clouds
    gt = write_json_document(
        planar_pose(0.1, -0.05, 0.02).to_dict(), tmp_path / "gt.json"
    )
    out = tmp_path / "grad.json"
    argv = [
        "grad-check",
        "--source",
        str(source),
        "--target",
        str(target),
        "--gt",
        str(gt),
        "--iterations",
        "2",
        "--out",
        str(out),
    ]
    assert dicp_experiment.run(argv, console) == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    assert len(report["entries"]) == len(room_points())


def test_keyboard_interrupt(monkeypatch, tmp_path, clouds, console):
    def cancelled(self, args):
        raise KeyboardInterrupt

    monkeypatch.setattr(IcpComponent, "run", cancelled)
    source, target = clouds
    argv = ["icp", "--source", str(source), "--target", str(target), "--out", "r.json"]
    assert dicp_experiment.run(argv, console) == 1
    assert "Operation cancelled by user." in console.file.getvalue()


def test_train_mask_writes_mask_and_trace(tmp_path, console):
    config = write_json_document(
        {"train": {"epochs": 2, "geometry": {"width": 32, "pixel_size": 0.5}}},
        tmp_path / "config.json",
    )
    out = tmp_path / "mask"
    argv = ["train-mask", "--seed", "3", "--config", str(config), "--out", str(out)]
    assert dicp_experiment.run(argv, console) == 0
    mask = load_mask(out / "mask.png")
    assert mask.values.shape == (32, 32)
    assert (out / "mask.json").exists()
    assert len(pd.read_csv(out / "trace.csv")) == 2


def test_eval_prints_the_summary(tmp_path, console):
    out = tmp_path / "report"
    argv = [
        "eval",
        "--seed",
        "2",
        "--sigmas",
        "0",
        "--trials",
        "2",
        "--out",
        str(out),
    ]
    assert dicp_experiment.run(argv, console) == 0
    assert (out / "summary.csv").exists()
    assert "Localisation summary" in console.file.getvalue()
