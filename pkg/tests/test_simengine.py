"""Tests for the closed-loop simulation and the training loop."""

from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from lasil_traffic.config import RunConfig, ablation
from lasil_traffic.diffcore import ParamStore
from lasil_traffic.exceptions import DataError
from lasil_traffic.graphstate import GraphConfig
from lasil_traffic.policy import PolicyModel
from lasil_traffic.roadnet import RoadNetwork
from lasil_traffic.simengine import (
    LOSS_COLUMNS,
    ExpertSampler,
    ReplayBuffer,
    SimSettings,
    WorldState,
    build_models,
    expert_sample,
    initial_world,
    load_policy,
    rollout,
    route_progress,
    sim_step,
    simulate,
    train,
    write_metrics,
)
from lasil_traffic.trajdata import TrajectoryDataset

from .conftest import constant_speed_dataset, make_graph

STILL = GraphConfig(history_steps=4, route_points=3, neighbor_count=2, origin_perturbation_std=0.0)


def still_policy() -> PolicyModel:
    """Policy whose mean is the frame origin for every step."""
    return PolicyModel(
        ParamStore(),
        hidden_size=8,
        history_steps=STILL.history_steps,
        context_size=STILL.context_size,
        future_steps=3,
        rng=np.random.default_rng(0),
        zero_head=True,
    )


def still_settings(**changes: object) -> SimSettings:
    settings = SimSettings(graph=STILL, future_steps=3, deterministic=True, projection=False, lqr=False)
    return replace(settings, **changes)


@pytest.fixture
def small_policy(small_config: RunConfig) -> PolicyModel:
    _, policy, _ = build_models(small_config)
    return policy


class TestWorld:
    def test_initial_world(self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork) -> None:
        world = initial_world(expert_dataset, corridor, 3, seed=1, settings=still_settings())
        assert [agent.id for agent in world.agents] == ["a0", "a1"]
        assert [record.id for record in world.pending] == ["a2"]
        assert world.t == pytest.approx(1.2)
        assert world.agent("a0").history.shape == (4, 2)
        np.testing.assert_allclose(world.agent("a0").position, [22.0, 0.0])
        np.testing.assert_allclose(world.agent("a0").destination, [166.0, 0.0])
        with pytest.raises(KeyError):
            world.agent("a2")

    def test_empty_world_steps(self, corridor: RoadNetwork) -> None:
        world = WorldState(t=0.0, step=0, seed=1)
        after = sim_step(world, still_policy(), corridor, still_settings())
        assert after.step == 1
        assert after.t == pytest.approx(0.4)
        assert after.agents == ()
        assert after.graph is not None
        assert after.graph.num_nodes == 0

    def test_zero_mean_policy_holds_agents(self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork) -> None:
        settings = still_settings()
        world = initial_world(expert_dataset, corridor, 2, seed=1, settings=settings)
        after = sim_step(world, still_policy(), corridor, settings)
        for agent in after.agents:
            np.testing.assert_allclose(agent.position, world.agent(agent.id).position, atol=1e-9)
            assert agent.history.shape == (4, 2)

    def test_projection_keeps_agents_on_lane(self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork) -> None:
        settings = still_settings(projection=True, deterministic=False)
        world = initial_world(expert_dataset, corridor, 2, seed=1, settings=settings)
        for _ in range(3):
            world = sim_step(world, still_policy(), corridor, settings)
        for agent in world.agents:
            assert abs(agent.position[1]) <= 1.75 + 1e-9

    def test_scheduled_agent_spawns(self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork) -> None:
        settings = still_settings()
        world = initial_world(expert_dataset, corridor, 0, seed=1, settings=settings)
        for _ in range(5):
            world = sim_step(world, still_policy(), corridor, settings)
            assert "a2" not in [agent.id for agent in world.agents]
        world = sim_step(world, still_policy(), corridor, settings)
        assert world.step == 6
        spawned = world.agent("a2")
        np.testing.assert_allclose(spawned.position, [5.0, 0.0])
        assert spawned.history.shape == (1, 2)
        assert world.pending == ()

    def test_agent_near_destination_is_removed(self, corridor: RoadNetwork) -> None:
        dataset = constant_speed_dataset({"b0": (50.0, 0), "b1": (10.0, 0)}, steps=5, speed=1.0)
        settings = still_settings(arrival_radius=5.0)
        world = initial_world(dataset, corridor, 0, seed=1, settings=settings)
        after = sim_step(world, still_policy(), corridor, settings)
        assert after.agents == ()

    def test_agent_past_timeout_is_removed(self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork) -> None:
        settings = still_settings(arrival_timeout=0.0, arrival_radius=1.0)
        world = initial_world(expert_dataset, corridor, 38, seed=1, settings=settings)
        world = sim_step(world, still_policy(), corridor, settings)
        assert [agent.id for agent in world.agents] == ["a0", "a1", "a2"]
        world = sim_step(world, still_policy(), corridor, settings)
        assert [agent.id for agent in world.agents] == ["a2"]

    def test_route_progress_never_moves_back(self, corridor: RoadNetwork) -> None:
        route = ("A", "B")
        assert route_progress(corridor, route, np.array([250.0, 0.0])) == 1
        assert route_progress(corridor, route, np.array([50.0, 0.0]), start=1) == 1
        assert route_progress(corridor, route, np.array([350.0, 0.0]), window=1) == 0

    def test_same_seed_same_trace(
        self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork, small_policy: PolicyModel
    ) -> None:
        settings = SimSettings(graph=STILL, future_steps=4)
        first = simulate(expert_dataset, corridor, small_policy, settings, 2, 5, seed=3)
        second = simulate(expert_dataset, corridor, small_policy, replace(settings, workers=3), 2, 5, seed=3)
        assert [a.id for a in first.trace.agents] == [a.id for a in second.trace.agents]
        for a, b in zip(first.trace.agents, second.trace.agents):
            np.testing.assert_array_equal(a.positions, b.positions)
        assert first.metrics == second.metrics

    def test_simulation_trace_and_metrics(
        self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork, small_policy: PolicyModel
    ) -> None:
        result = simulate(expert_dataset, corridor, small_policy, SimSettings(graph=STILL, future_steps=4), 2, 5, 3)
        assert [row["step"] for row in result.metrics] == [2, 3, 4, 5, 6, 7]
        assert result.metrics[0]["mean_speed"] is None
        assert result.metrics[0]["agents"] == 2
        a0 = result.trace.agent("a0")
        assert a0.first_step == 2
        assert a0.positions.shape == (6, 2)
        assert a0.route == ("A", "B")
        assert result.trace.agent("a2").first_step == 6


class TestReplayBuffer:
    def test_capacity_and_clear(self) -> None:
        buffer = ReplayBuffer(2)
        graphs = [make_graph(np.zeros((n, 3, 2)), 5) for n in (1, 2, 3)]
        buffer.add(graphs[0])
        assert not buffer.filled
        buffer.add(graphs[1])
        buffer.add(graphs[2])
        assert buffer.filled
        assert buffer.graphs == (graphs[1], graphs[2])
        buffer.clear()
        assert len(buffer) == 0
        assert buffer.clears == 1

    def test_sample_merges_until_min_nodes(self) -> None:
        buffer = ReplayBuffer(5)
        for n in (1, 1, 1, 1):
            buffer.add(make_graph(np.zeros((n, 3, 2)), 5))
        merged = buffer.sample(np.random.default_rng(0), min_nodes=3)
        assert merged is not None
        assert merged.num_nodes == 3

    def test_sample_skips_empty_graphs(self, corridor: RoadNetwork) -> None:
        buffer = ReplayBuffer(3)
        buffer.add(sim_step(WorldState(t=0.0, step=0, seed=0), still_policy(), corridor, still_settings()).graph)
        assert buffer.sample(np.random.default_rng(0)) is None

    def test_rollout_adds_one_graph_per_step(
        self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork, small_policy: PolicyModel
    ) -> None:
        buffer = ReplayBuffer(10)
        settings = SimSettings(graph=STILL, future_steps=4, deterministic=True)
        world = initial_world(expert_dataset, corridor, 0, seed=2, settings=settings)
        rollout(world, 4, buffer, small_policy, corridor, settings)
        assert len(buffer) == 4
        rollout(world, 3, buffer, small_policy, corridor, settings)
        assert len(buffer) == 7


class TestExpertBatches:
    def test_expert_sample_masks_missing_future(
        self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork
    ) -> None:
        sample = expert_sample(expert_dataset, corridor, 37, STILL, 4, seed=0)
        assert sample.graph.agent_ids == ("a0", "a1", "a2")
        np.testing.assert_array_equal(sample.mask[0], [True, True, False, False])
        # Zero origin noise and a heading along x: the local future is a forward offset
        np.testing.assert_allclose(sample.futures[0, :2], [[4.0, 0.0], [8.0, 0.0]], atol=1e-9)

    def test_batch_reaches_size(self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork) -> None:
        sampler = ExpertSampler(expert_dataset, corridor, STILL, 4, batch_size=5, seed=1)
        batch = sampler.batch(1)
        assert batch.supervised_nodes >= 5
        again = sampler.batch(1)
        np.testing.assert_array_equal(batch.graph.past, again.graph.past)

    def test_dataset_without_futures(self, corridor: RoadNetwork) -> None:
        dataset = constant_speed_dataset({"a0": (10.0, 0)}, steps=1)
        with pytest.raises(DataError, match="too small"):
            ExpertSampler(dataset, corridor, STILL, 4, batch_size=2, seed=1)


class TestTraining:
    def test_training_writes_losses_and_checkpoint(
        self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork, small_config: RunConfig, tmp_path  # noqa: ANN001
    ) -> None:
        result = train(expert_dataset, corridor, small_config, tmp_path)
        assert [row["step"] for row in result.losses] == [1, 2, 3, 4]
        assert result.buffer_clears == [2, 4]
        # Learner terms appear once the first rollout has filled the buffer
        assert result.losses[1]["vae_learner_kl"] is None
        assert result.losses[2]["vae_learner_kl"] is not None
        assert result.losses[2]["buffer_size"] == small_config.sim_length

        frame = pd.read_csv(tmp_path / "losses.csv")
        assert list(frame.columns) == list(LOSS_COLUMNS)
        assert len(frame) == 4
        assert result.checkpoint == tmp_path / "checkpoint.json"

        policy, loaded = load_policy(result.checkpoint, RunConfig())
        assert loaded.hidden_size == small_config.hidden_size
        graph = expert_sample(expert_dataset, corridor, 3, small_config.graph_config, 4, seed=0).graph
        _, trained, _ = build_models(small_config, result.store)
        np.testing.assert_allclose(policy.predict(graph).mean, trained.predict(graph).mean)

    def test_training_is_reproducible(
        self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork, small_config: RunConfig
    ) -> None:
        first = train(expert_dataset, corridor, small_config)
        second = train(expert_dataset, corridor, small_config)
        assert first.losses == second.losses

    def test_behavior_cloning_trains_policy_only(
        self, expert_dataset: TrajectoryDataset, corridor: RoadNetwork, small_config: RunConfig
    ) -> None:
        result = train(expert_dataset, corridor, ablation(small_config, "BC"))
        assert result.buffer_clears == []
        assert all(row["vae_expert_recon"] is None for row in result.losses)
        assert all(name.startswith("policy.") for name in result.store.names())


def test_write_metrics_sorted_keys(tmp_path) -> None:  # noqa: ANN001
    path = tmp_path / "metrics.jsonl"
    write_metrics([{"t": 0.0, "agents": 2, "step": 0}], path)
    line = path.read_text(encoding="utf-8").splitlines()[0]
    assert list(json.loads(line)) == ["agents", "step", "t"]
