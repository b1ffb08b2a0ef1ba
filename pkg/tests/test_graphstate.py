"""Tests for local frames and traffic graph construction."""

from __future__ import annotations

import numpy as np
import pytest

from lasil_traffic.const import VEHICLE_TYPES
from lasil_traffic.graphstate import (
    LIGHT_CHANNELS,
    AgentFrame,
    AgentSnapshot,
    GraphConfig,
    build_graph,
    context_size,
    frame_rotation,
    future_targets,
    merge_graphs,
    nearest_neighbors,
    pad_history,
    to_global,
    to_local,
)
from lasil_traffic.roadnet import Lane, LightState, Road, RoadNetwork

from .conftest import make_graph

NO_NOISE = GraphConfig(history_steps=4, route_points=3, neighbor_count=2, origin_perturbation_std=0.0)


def snapshot(agent_id: str, x: float, vehicle_type: str = "car") -> AgentSnapshot:
    history = np.column_stack((x - 4.0 * np.arange(3)[::-1], np.zeros(3)))
    return AgentSnapshot(
        id=agent_id,
        vehicle_type=vehicle_type,
        history=history,
        route=("A", "B"),
        route_index=0,
        destination=np.array([400.0, 0.0]),
    )


def test_context_size() -> None:
    assert context_size(30) == len(VEHICLE_TYPES) + 90 + 3 + 2
    assert NO_NOISE.context_size == len(VEHICLE_TYPES) + 9 + 5


def test_frame_round_trip() -> None:
    frame = AgentFrame(origin=np.array([3.0, -2.0]), rotation=0.7)
    points = np.array([[1.0, 2.0], [-5.0, 0.5]])
    np.testing.assert_allclose(to_global(frame, to_local(frame, points)), points)
    # Local x axis points along the rotation
    np.testing.assert_allclose(to_local(frame, frame.origin + [np.cos(0.7), np.sin(0.7)]), [1.0, 0.0], atol=1e-12)


class TestFrameRotation:
    def test_points_at_destination(self) -> None:
        agent = AgentSnapshot("a", "car", np.array([[0.0, 0.0]]), ("A",), 0, np.array([0.0, 5.0]))
        assert frame_rotation(agent) == pytest.approx(np.pi / 2)

    def test_falls_back_to_heading(self) -> None:
        agent = AgentSnapshot("a", "car", np.array([[1.0, 1.0], [0.0, 0.0]]), ("A",), 0, np.zeros(2))
        assert frame_rotation(agent) == pytest.approx(-3.0 * np.pi / 4)

    def test_degenerate_is_zero(self) -> None:
        agent = AgentSnapshot("a", "car", np.array([[0.0, 0.0]]), ("A",), 0, np.zeros(2))
        assert frame_rotation(agent) == 0.0


def test_pad_history() -> None:
    padded = pad_history(np.array([[1.0, 0.0], [2.0, 0.0]]), 4)
    np.testing.assert_allclose(padded[:, 0], [1.0, 1.0, 1.0, 2.0])
    trimmed = pad_history(np.arange(10.0).reshape(5, 2), 2)
    np.testing.assert_allclose(trimmed, [[6.0, 7.0], [8.0, 9.0]])


class TestNeighbors:
    def test_count_radius_and_ties(self) -> None:
        positions = np.array([[0.0, 0.0], [5.0, 0.0], [-5.0, 0.0], [30.0, 0.0]])
        result = nearest_neighbors(positions, ["m", "z", "b", "far"], count=1, max_distance=20.0)
        # Both neighbors of "m" are 5 m away; "b" wins on id
        assert result[0] == [2]
        assert result[3] == []

    def test_empty(self) -> None:
        assert nearest_neighbors(np.zeros((0, 2)), [], 3, 10.0) == []


class TestBuildGraph:
    def test_features_in_local_frame(self, corridor: RoadNetwork) -> None:
        agents = [snapshot("a0", 50.0), snapshot("a1", 60.0, "bus")]
        graph = build_graph(agents, corridor, t=0.0, seed=0, step=0, config=NO_NOISE)

        assert graph.past.shape == (2, 4, 2)
        assert graph.context.shape == (2, NO_NOISE.context_size)
        # Current position is the frame origin; the padded oldest entry repeats
        np.testing.assert_allclose(graph.past[0, :, 0], [-8.0, -8.0, -4.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(graph.rotations, 0.0)

        types = len(VEHICLE_TYPES)
        assert graph.context[1, VEHICLE_TYPES.index("bus")] == 1.0
        waypoints = graph.context[0, types : types + 9].reshape(3, 3)
        np.testing.assert_allclose(waypoints[:, 0], [5.0, 10.0, 15.0], atol=1e-9)
        np.testing.assert_allclose(waypoints[:, 2], 3.5)
        # Road A is red at t = 0
        light = graph.context[0, types + 9 : types + 12]
        np.testing.assert_array_equal(light, np.eye(3)[LIGHT_CHANNELS.index(LightState.RED)])
        np.testing.assert_allclose(graph.context[0, -2:], [350.0, 0.0], atol=1e-9)

    def test_edges(self, corridor: RoadNetwork) -> None:
        agents = [snapshot("a0", 50.0), snapshot("a1", 60.0), snapshot("a2", 150.0)]
        graph = build_graph(agents, corridor, t=0.0, seed=0, step=0, config=NO_NOISE)
        edges = list(zip(graph.edge_src.tolist(), graph.edge_dst.tolist()))
        assert edges == [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)]
        np.testing.assert_allclose(graph.edge_feat[1], [10.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(graph.edge_feat[0], 0.0)

    def test_perturbation_independent_of_order(self, corridor: RoadNetwork) -> None:
        config = GraphConfig(history_steps=4, route_points=3, neighbor_count=2, origin_perturbation_std=2.0)
        agents = [snapshot("a0", 50.0), snapshot("a1", 60.0), snapshot("a2", 150.0)]
        forward = build_graph(agents, corridor, t=0.0, seed=5, step=3, config=config)
        backward = build_graph(agents[::-1], corridor, t=0.0, seed=5, step=3, config=config)
        np.testing.assert_allclose(forward.origins, backward.origins[::-1])
        assert not np.allclose(forward.origins, [agent.position for agent in agents])

        other_step = build_graph(agents, corridor, t=0.0, seed=5, step=4, config=config)
        assert not np.allclose(forward.origins, other_step.origins)

    def test_explicit_perturbations(self, corridor: RoadNetwork) -> None:
        agents = [snapshot("a0", 50.0)]
        graph = build_graph(agents, corridor, 0.0, 0, 0, NO_NOISE, perturbations=np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(graph.origins, [[51.0, 2.0]])


def test_future_targets_mask(corridor: RoadNetwork) -> None:
    agents = [snapshot("a0", 50.0), snapshot("a1", 60.0)]
    graph = build_graph(agents, corridor, t=0.0, seed=0, step=0, config=NO_NOISE)
    sample = future_targets(graph, [np.array([[54.0, 0.0], [58.0, 0.0]]), None], horizon=3)
    np.testing.assert_array_equal(sample.mask, [[True, True, False], [False, False, False]])
    np.testing.assert_allclose(sample.futures[0, :2], [[4.0, 0.0], [8.0, 0.0]], atol=1e-9)
    assert sample.supervised_nodes == 1


def test_merge_offsets_edges() -> None:
    first = make_graph(np.zeros((2, 3, 2)), context_size=5, seed=1)
    second = make_graph(np.ones((3, 3, 2)), context_size=5, seed=2)
    merged = merge_graphs([first, second])
    assert merged.num_nodes == 5
    assert merged.num_edges == first.num_edges + second.num_edges
    assert merged.edge_src[first.num_edges:].min() == 2
    assert merged.agent_ids == first.agent_ids + second.agent_ids


def test_permuted_keeps_structure() -> None:
    graph = make_graph(np.random.default_rng(0).normal(size=(4, 3, 2)), context_size=5)
    order = [2, 0, 3, 1]
    permuted = graph.permuted(order)
    np.testing.assert_allclose(permuted.past, graph.past[order])
    original = {
        (graph.agent_ids[s], graph.agent_ids[d]): tuple(f)
        for s, d, f in zip(graph.edge_src, graph.edge_dst, graph.edge_feat)
    }
    moved = {
        (permuted.agent_ids[s], permuted.agent_ids[d]): tuple(f)
        for s, d, f in zip(permuted.edge_src, permuted.edge_dst, permuted.edge_feat)
    }
    assert moved == original


def point_agent(agent_id: str, position: np.ndarray, destination: np.ndarray) -> AgentSnapshot:
    return AgentSnapshot(
        id=agent_id,
        vehicle_type="car",
        history=np.asarray(position, dtype=np.float64).reshape(1, 2),
        route=("A", "B"),
        route_index=0,
        destination=np.asarray(destination, dtype=np.float64),
    )


def test_frame_round_trip_random() -> None:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        frame = AgentFrame(origin=rng.uniform(-1000.0, 1000.0, size=2), rotation=float(rng.uniform(-np.pi, np.pi)))
        point = rng.uniform(-1000.0, 1000.0, size=2)
        worst = max(worst, float(np.linalg.norm(to_global(frame, to_local(frame, point)) - point)))
    assert worst < 1e-9


class TestGraphInvariants:
    def test_translation_invariance(self, corridor: RoadNetwork) -> None:
        shift = np.array([1234.5, -678.25])
        shifted_network = RoadNetwork(
            roads=tuple(
                Road(
                    id=road.id,
                    lanes=tuple(Lane(centerline=lane.centerline + shift, width=lane.width) for lane in road.lanes),
                    successors=road.successors,
                )
                for road in corridor.roads
            ),
            signals=corridor.signals,
        )
        agents = [snapshot("a0", 50.0), snapshot("a1", 58.0), snapshot("a2", 63.0)]
        moved = [
            AgentSnapshot(a.id, a.vehicle_type, a.history + shift, a.route, a.route_index, a.destination + shift)
            for a in agents
        ]
        config = GraphConfig(history_steps=4, route_points=3, neighbor_count=2, origin_perturbation_std=2.0)

        graph = build_graph(agents, corridor, t=12.0, seed=3, step=7, config=config)
        translated = build_graph(moved, shifted_network, t=12.0, seed=3, step=7, config=config)

        np.testing.assert_allclose(translated.origins, graph.origins + shift)
        np.testing.assert_allclose(translated.past, graph.past, atol=1e-9)
        np.testing.assert_allclose(translated.context, graph.context, atol=1e-9)
        np.testing.assert_array_equal(translated.edge_src, graph.edge_src)
        np.testing.assert_array_equal(translated.edge_dst, graph.edge_dst)
        np.testing.assert_allclose(translated.edge_feat, graph.edge_feat, atol=1e-9)

    def test_edges_antisymmetric_with_shared_rotation(self, corridor: RoadNetwork) -> None:
        heading = np.array([np.cos(0.6), np.sin(0.6)])
        agents = [point_agent(f"a{k}", 3.0 * k * heading, 1000.0 * heading) for k in range(4)]
        config = GraphConfig(history_steps=2, route_points=3, neighbor_count=6, origin_perturbation_std=2.0)
        graph = build_graph(agents, corridor, t=0.0, seed=1, step=0, config=config)

        np.testing.assert_allclose(graph.rotations, 0.6)
        features = {(int(s), int(d)): f for s, d, f in zip(graph.edge_src, graph.edge_dst, graph.edge_feat)}
        pairs = [(s, d) for s, d in features if s != d]
        assert len(pairs) == 12
        for s, d in pairs:
            np.testing.assert_allclose(features[(s, d)], -features[(d, s)], atol=1e-12)

    def test_cluster_has_six_nearest_neighbors(self, corridor: RoadNetwork) -> None:
        rng = np.random.default_rng(4)
        positions = rng.uniform(0.0, 10.0, size=(8, 2)) + [50.0, -5.0]
        agents = [point_agent(f"a{k}", positions[k], [400.0, 0.0]) for k in range(8)]
        config = GraphConfig(history_steps=2, route_points=3, neighbor_count=6, origin_perturbation_std=0.0)
        graph = build_graph(agents, corridor, t=0.0, seed=0, step=0, config=config)

        distances = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
        for i in range(8):
            out = {int(d) for s, d in zip(graph.edge_src, graph.edge_dst) if s == i and d != i}
            expected = {int(j) for j in np.argsort(distances[i])[1:7]}
            assert len(out) == 6
            assert out == expected
