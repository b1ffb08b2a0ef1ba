"""Tests for the command line entry points."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from lasil_traffic.cli import build_parser, load_edits, main, source_routes, start_step
from lasil_traffic.const import EXIT_CONFIG_ERROR, EXIT_DATA_ERROR, EXIT_OK
from lasil_traffic.exceptions import NetworkFormatError
from lasil_traffic.roadnet import RoadNetwork, load_network

from .conftest import constant_speed_dataset


def base_args(fixtures: Path, out: Path) -> list[str]:
    return [
        "--config",
        str(fixtures / "small_config.json"),
        "--set",
        f"network={fixtures / 'corridor.json'}",
        "--set",
        f"trajectories={fixtures / 'trajectories.csv'}",
        "--output",
        str(out),
    ]


@pytest.fixture
def trained(fixtures_dir: Path, tmp_path: Path) -> Path:
    """Checkpoint trained with the small configuration."""
    out = tmp_path / "train"
    assert main(["train", *base_args(fixtures_dir, out)]) == EXIT_OK
    return out / "checkpoint.json"


def test_evaluate_identical_traces(fixtures_dir: Path, tmp_path: Path) -> None:
    csv = str(fixtures_dir / "trajectories.csv")
    code = main(["evaluate", *base_args(fixtures_dir, tmp_path), "--real", csv, "--sim", csv])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert report["position_rmse"] == 0.0
    assert report["min_ade"] == 0.0
    assert report["road_density_rmse"] == 0.0
    for name in ("speed_histogram.csv", "leader_histogram.csv", "density.svg", "speed.svg", "road_means.csv"):
        assert (tmp_path / name).exists()


def test_evaluate_counts_short_offroad_sim_agents(fixtures_dir: Path, tmp_path: Path) -> None:
    real = fixtures_dir / "trajectories.csv"
    ghost = [f"ghost,car,{0.4 * k:.1f},{50.0 + 4.0 * k},5.0" for k in range(3)]
    sim = tmp_path / "sim.csv"
    sim.write_text(real.read_text(encoding="utf-8") + "\n".join(ghost) + "\n", encoding="utf-8")

    out = tmp_path / "eval"
    assert main(["evaluate", *base_args(fixtures_dir, out), "--real", str(real), "--sim", str(sim)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    # Off road in 1 of 2 vehicles at steps 0 and 1, 1 of 3 at step 2, over 14 steps
    assert report["offroad_rate"] == pytest.approx(2.0 / 21.0)
    assert report["road_density_rmse"] > 0.0
    assert report["position_rmse"] == 0.0


def test_unknown_config_key_exits_with_config_error(fixtures_dir: Path, tmp_path: Path) -> None:
    csv = str(fixtures_dir / "trajectories.csv")
    args = ["evaluate", *base_args(fixtures_dir, tmp_path), "--set", "bogus=1", "--real", csv, "--sim", csv]
    assert main(args) == EXIT_CONFIG_ERROR


def test_missing_network_exits_with_config_error(tmp_path: Path) -> None:
    assert main(["train", "--output", str(tmp_path)]) == EXIT_CONFIG_ERROR


def test_bad_network_exits_with_data_error(fixtures_dir: Path, tmp_path: Path) -> None:
    args = ["train", *base_args(fixtures_dir, tmp_path), "--set", f"network={fixtures_dir / 'bad_network.json'}"]
    assert main(args) == EXIT_DATA_ERROR


def test_train_writes_outputs(trained: Path) -> None:
    out = trained.parent
    assert trained.exists()
    losses = pd.read_csv(out / "losses.csv")
    assert list(losses["step"]) == [1, 2, 3]
    assert json.loads((out / "config.json").read_text(encoding="utf-8"))["train_steps"] == 3


def test_simulate_writes_trace(fixtures_dir: Path, tmp_path: Path, trained: Path) -> None:
    out = tmp_path / "sim"
    args = ["simulate", *base_args(fixtures_dir, out), "--set", f"checkpoint={trained}", "--start-step", "2"]
    assert main([*args, "--steps", "3"]) == EXIT_OK
    trace = pd.read_csv(out / "trace.csv")
    assert set(trace["id"]) <= {"c0", "c1"}
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text(encoding="utf-8").splitlines()]
    assert [row["step"] for row in rows] == [2, 3, 4, 5]


def test_whatif_without_changes(fixtures_dir: Path, tmp_path: Path, trained: Path) -> None:
    out = tmp_path / "whatif"
    args = ["whatif", *base_args(fixtures_dir, out), "--set", f"checkpoint={trained}"]
    assert main([*args, "--edits", str(fixtures_dir / "edits_noop.json"), "--steps", "4"]) == EXIT_OK
    deltas = pd.read_csv(out / "road_deltas.csv")
    assert list(deltas["road"]) == ["A", "B"]
    np.testing.assert_allclose(deltas["density_delta"], 0.0)
    speed = deltas["speed_delta"].to_numpy()
    assert np.all(np.isnan(speed) | (speed == 0.0))
    assert [road.id for road in load_network(out / "network.json").roads] == ["A", "B"]
    assert (out / "density_delta.svg").exists()


def test_gen_synthetic(fixtures_dir: Path, tmp_path: Path) -> None:
    args = ["gen-synthetic", *base_args(fixtures_dir, tmp_path), "--rate", "0.2", "--horizon", "60"]
    assert main(args) == EXIT_OK
    demand = json.loads((tmp_path / "demand.json").read_text(encoding="utf-8"))
    assert demand
    trace = pd.read_csv(tmp_path / "trajectories.csv")
    assert list(trace.columns) == ["id", "type", "t", "x", "y"]


def test_estimate_lights(fixtures_dir: Path, tmp_path: Path) -> None:
    assert main(["estimate-lights", *base_args(fixtures_dir, tmp_path)]) == EXIT_OK
    lights = pd.read_csv(tmp_path / "lights.csv")
    assert list(lights["road_id"]) == ["A"]
    assert (tmp_path / "network.json").exists()


def test_profile(fixtures_dir: Path, tmp_path: Path) -> None:
    args = ["profile", *base_args(fixtures_dir, tmp_path), "--sizes", "1", "2", "--steps", "1"]
    assert main(args) == EXIT_OK
    assert len(pd.read_csv(tmp_path / "profile.csv")) == 2
    assert json.loads((tmp_path / "profile.json").read_text(encoding="utf-8"))["sizes"] == [1, 2]


def test_ablate_single_row(fixtures_dir: Path, tmp_path: Path) -> None:
    args = ["ablate", *base_args(fixtures_dir, tmp_path), "--rows", "BC", "--runs", "1"]
    assert main(args) == EXIT_OK
    table = pd.read_csv(tmp_path / "ablation.csv")
    assert list(table["method"]) == ["BC"]
    assert "position_rmse_mean" in table.columns
    summary = json.loads((tmp_path / "ablation.json").read_text(encoding="utf-8"))
    assert len(summary["BC"]["runs"]) == 1


def test_version_flag() -> None:
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(["--version"])
    assert excinfo.value.code == 0


def test_source_routes(corridor: RoadNetwork, loop: RoadNetwork) -> None:
    assert source_routes(corridor) == [("A", "B")]
    routes = source_routes(loop)
    assert [route[0] for route in routes] == ["L0", "L1", "L2", "L3"]
    assert routes[0] == ("L0", "L1", "L2", "L3")


def test_start_step_is_seeded() -> None:
    dataset = constant_speed_dataset({"a0": (10.0, 0)}, steps=30)
    first = start_step(dataset, 10, seed=4)
    assert first == start_step(dataset, 10, seed=4)
    assert 0 <= first <= 19
    assert start_step(dataset, 100, seed=4) == 0


def test_malformed_edits(tmp_path: Path) -> None:
    path = tmp_path / "edits.json"
    path.write_text(json.dumps({"roads": [{"id": "B"}]}), encoding="utf-8")
    with pytest.raises(NetworkFormatError, match="roads\\[0\\]"):
        load_edits(path)
    path.write_text(json.dumps({"roads": [{"id": "B", "lanes": [{"centerline": [[0, 0]]}]}]}), encoding="utf-8")
    with pytest.raises(NetworkFormatError, match="lanes\\[0\\]"):
        load_edits(path)
