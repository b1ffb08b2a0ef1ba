"""Shared fixtures: small networks, datasets and reduced model sizes."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from lasil_traffic.config import RunConfig
from lasil_traffic.graphstate import TrafficGraph
from lasil_traffic.roadnet import Lane, Road, RoadNetwork, SignalSchedule
from lasil_traffic.trajdata import TrajectoryDataset, dataset_from_arrays

FIXTURES = Path(__file__).parent / "fixtures"

LANE_WIDTH = 3.5


def straight_lane(start: tuple[float, float], end: tuple[float, float], width: float = LANE_WIDTH) -> Lane:
    """Single-segment lane."""
    return Lane(centerline=np.array([start, end], dtype=np.float64), width=np.array([width]))


@pytest.fixture
def fixtures_dir() -> Path:
    """Directory of the JSON and CSV fixtures."""
    return FIXTURES


@pytest.fixture
def corridor() -> RoadNetwork:
    """Two 200 m roads along the x axis, A then B, signal at the end of A."""
    return RoadNetwork(
        roads=(
            Road(id="A", lanes=(straight_lane((0.0, 0.0), (200.0, 0.0)),), successors=("B",)),
            Road(id="B", lanes=(straight_lane((200.0, 0.0), (400.0, 0.0)),), successors=()),
        ),
        signals=(SignalSchedule(road_id="A", first_green=10.0, green_time=20.0, cycle=45.0),),
    )


@pytest.fixture
def loop() -> RoadNetwork:
    """Four 100 m roads forming a counter-clockwise square."""
    corners = [(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)]
    roads = []
    for i in range(4):
        roads.append(
            Road(
                id=f"L{i}",
                lanes=(straight_lane(corners[i], corners[(i + 1) % 4]),),
                successors=(f"L{(i + 1) % 4}",),
            )
        )
    return RoadNetwork(roads=tuple(roads))


def constant_speed_dataset(
    starts: dict[str, tuple[float, int]],
    steps: int = 40,
    speed: float = 10.0,
    dt: float = 0.4,
) -> TrajectoryDataset:
    """Agents driving along y = 0 on the corridor at constant speed.

    Args:
        starts: {id: (start x, first step)}
        steps: Recorded positions per agent
        speed: Speed (m/s)
        dt: Step length (s)
    """
    tracks = {}
    for agent_id, (x0, first_step) in starts.items():
        xs = x0 + speed * dt * np.arange(steps)
        positions = np.column_stack((xs, np.zeros(steps)))
        tracks[agent_id] = ("car", first_step, positions, ("A", "B"))
    return dataset_from_arrays(tracks, dt)


@pytest.fixture
def expert_dataset() -> TrajectoryDataset:
    """Three cars on the corridor, one entering later."""
    return constant_speed_dataset({"a0": (10.0, 0), "a1": (40.0, 0), "a2": (5.0, 6)})


@pytest.fixture
def small_config() -> RunConfig:
    """Reduced sizes so training and simulation tests run in seconds."""
    return RunConfig(
        seed=7,
        history_steps=4,
        future_steps=4,
        route_points=3,
        neighbor_count=2,
        hidden_size=16,
        latent_dim=4,
        batch_size=2,
        train_steps=4,
        sim_interval=2,
        sim_length=3,
        checkpoint_every=0,
        learning_rate=1e-3,
        eval_steps=6,
        min_ade_rollouts=2,
    )


def make_graph(past: np.ndarray, context_size: int, seed: int = 0) -> TrafficGraph:
    """Graph with self-edges and a ring of neighbor edges, random context."""
    n = past.shape[0]
    rng = np.random.default_rng(seed)
    src, dst = [], []
    for i in range(n):
        for j in sorted({i, (i + 1) % n}):
            src.append(i)
            dst.append(j)
    src_array = np.asarray(src, dtype=np.int64)
    dst_array = np.asarray(dst, dtype=np.int64)
    return TrafficGraph(
        agent_ids=tuple(f"n{i}" for i in range(n)),
        past=past,
        context=rng.normal(size=(n, context_size)),
        origins=rng.normal(size=(n, 2)),
        rotations=rng.uniform(-np.pi, np.pi, size=n),
        edge_src=src_array,
        edge_dst=dst_array,
        edge_feat=np.where((src_array != dst_array)[:, None], rng.normal(size=(src_array.size, 2)), 0.0),
    )
