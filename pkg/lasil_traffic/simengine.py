"""Closed-loop simulation and the interleaved training loop.

One simulation step runs in phases:
1. Build the traffic graph of all active agents
2. Predict future position distributions with the policy
3. Sample a future per agent (or take the mean in deterministic mode)
4. Transform it to global coordinates
5. Project every point onto the nearest on-road point
6. Smooth the projected targets with LQR from the current state
7. Advance each agent to the first planned position
8. Update route progress
9. Remove arrived agents and spawn scheduled ones

Training alternates policy and VAE steps on expert batches and refills a
replay buffer with policy rollouts every N steps.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd

from .config import RunConfig
from .const import (
    DEFAULT_ARRIVAL_RADIUS,
    DEFAULT_ARRIVAL_TIMEOUT,
    DEFAULT_DT,
    DEFAULT_FUTURE_STEPS,
    DEFAULT_LQR_ACCEL_WEIGHT,
    DEFAULT_OFFROAD_THRESHOLD,
    DEFAULT_WORKERS,
)
from .cvae import CvaeModel, VaeLosses, augment_expert, vae_train_step
from .diffcore import ParamStore
from .exceptions import DataError, NumericalError
from .graphstate import (
    AgentSnapshot,
    GraphConfig,
    GraphSample,
    TrafficGraph,
    build_graph,
    future_targets,
    merge_graphs,
    merge_samples,
    to_global,
)
from .lqr import lqr_smooth
from .policy import GaussianTrajectoryPrediction, PolicyModel, policy_train_step
from .roadnet import RoadNetwork, offroad_distance, project_to_road
from .store import CheckpointStore
from .streams import Purpose, counter_stream, derive_seed, step_stream
from .trajdata import AgentRecord, TrajectoryDataset

_LOGGER = logging.getLogger(__name__)

LOSS_COLUMNS = (
    "step",
    "policy_nll",
    "vae_expert_recon",
    "vae_expert_kl",
    "vae_learner_recon",
    "vae_learner_kl",
    "buffer_size",
)


@dataclass(frozen=True)
class SimSettings:
    """Settings of the closed-loop pipeline.

    Attributes:
        graph: Graph feature settings
        dt: Step length (s)
        future_steps: Predicted steps T
        lqr_accel_weight: LQR acceleration weight
        projection: Project sampled points onto the road
        lqr: Smooth targets with LQR
        deterministic: Use predicted means instead of samples
        offroad_threshold: Hint acceptance distance for projection (m)
        arrival_radius: Removal radius around the final recorded position (m)
        arrival_timeout: Grace time after the last recorded time (s)
        workers: Worker threads for the per-agent phases
    """

    graph: GraphConfig = field(default_factory=GraphConfig)
    dt: float = DEFAULT_DT
    future_steps: int = DEFAULT_FUTURE_STEPS
    lqr_accel_weight: float = DEFAULT_LQR_ACCEL_WEIGHT
    projection: bool = True
    lqr: bool = True
    deterministic: bool = False
    offroad_threshold: float = DEFAULT_OFFROAD_THRESHOLD
    arrival_radius: float = DEFAULT_ARRIVAL_RADIUS
    arrival_timeout: float = DEFAULT_ARRIVAL_TIMEOUT
    workers: int = DEFAULT_WORKERS

    @classmethod
    def from_config(cls, config: RunConfig) -> SimSettings:
        """Build settings from a run configuration."""
        return cls(
            graph=config.graph_config,
            dt=config.dt,
            future_steps=config.future_steps,
            lqr_accel_weight=config.lqr_accel_weight,
            projection=config.projection,
            lqr=config.lqr,
            deterministic=config.deterministic,
            offroad_threshold=config.offroad_threshold,
            arrival_radius=config.arrival_radius,
            arrival_timeout=config.arrival_timeout,
            workers=config.workers,
        )


@dataclass(frozen=True, eq=False)
class SimAgent:
    """One simulated vehicle.

    Attributes:
        id: Agent identifier
        vehicle_type: One of VEHICLE_TYPES
        history: Recent positions, oldest first, current last
        route: Road ids in driving order
        route_index: Index of the current road in the route
        destination: Final recorded position
        last_time: Last recorded time (s)
    """

    id: str
    vehicle_type: str
    history: np.ndarray
    route: tuple[str, ...]
    route_index: int
    destination: np.ndarray
    last_time: float

    @property
    def position(self) -> np.ndarray:
        """Current position."""
        return self.history[-1]

    def velocity(self, dt: float) -> np.ndarray:
        """Finite-difference velocity of the last step; zero with one point."""
        if self.history.shape[0] < 2:
            return np.zeros(2)
        return (self.history[-1] - self.history[-2]) / dt

    def snapshot(self) -> AgentSnapshot:
        """Graph construction view of the agent."""
        return AgentSnapshot(
            id=self.id,
            vehicle_type=self.vehicle_type,
            history=self.history,
            route=self.route,
            route_index=self.route_index,
            destination=self.destination,
        )


@dataclass(frozen=True, eq=False)
class WorldState:
    """Everything a simulation step needs.

    Attributes:
        t: Time (s)
        step: Grid step index (t = step * dt)
        seed: Seed of all random streams of this run
        agents: Active agents, ordered by id
        pending: Recorded agents not yet spawned, ordered by first step then id
        graph: Graph the step that produced this state was computed from
    """

    t: float
    step: int
    seed: int
    agents: tuple[SimAgent, ...] = ()
    pending: tuple[AgentRecord, ...] = ()
    graph: TrafficGraph | None = None

    def agent(self, agent_id: str) -> SimAgent:
        """Return an active agent by id."""
        for agent in self.agents:
            if agent.id == agent_id:
                return agent
        raise KeyError(agent_id)


def route_progress(
    network: RoadNetwork,
    route: Sequence[str],
    position: np.ndarray,
    start: int = 0,
    window: int | None = 2,
) -> int:
    """Return the index of the route road nearest to a position.

    Only roads from `start` on are considered, at most `window` of them, so
    progress never moves backwards.
    """
    stop = len(route) if window is None else min(len(route), start + window)
    candidates = list(route[start:stop])
    if not candidates:
        return start
    projected = network.project_on_roads(position, candidates)
    if projected is None:
        return start
    return start + candidates.index(projected.road_id)


def _history_length(config: GraphConfig) -> int:
    return max(config.history_steps, 2)


def agent_from_record(
    record: AgentRecord,
    network: RoadNetwork,
    step: int,
    config: GraphConfig,
) -> SimAgent:
    """Place a recorded agent at a step using its recorded history."""
    history = np.array(record.history_until(step, _history_length(config)), dtype=np.float64)
    index = route_progress(network, record.route, history[-1], 0, None)
    return SimAgent(
        id=record.id,
        vehicle_type=record.vehicle_type,
        history=history,
        route=record.route,
        route_index=index,
        destination=np.array(record.destination, dtype=np.float64),
        last_time=record.last_time,
    )


def initial_world(
    dataset: TrajectoryDataset,
    network: RoadNetwork,
    step: int,
    seed: int,
    settings: SimSettings | None = None,
) -> WorldState:
    """Initialize a world from the agents recorded at a step.

    Args:
        dataset: Recorded trajectories with routes
        network: Road network
        step: Start step
        seed: Seed of the run's random streams
        settings: Pipeline settings

    Returns:
        World with the active agents placed and later agents pending
    """
    settings = settings or SimSettings()
    routed = [record for record in dataset.agents if record.route]
    if len(routed) < len(dataset.agents):
        _LOGGER.warning("Ignoring %d agents without a route", len(dataset.agents) - len(routed))
    agents = tuple(
        agent_from_record(record, network, step, settings.graph) for record in routed if record.active_at(step)
    )
    pending = tuple(
        sorted((record for record in routed if record.first_step > step), key=lambda r: (r.first_step, r.id))
    )
    _LOGGER.debug("Initial world at step %d: %d active, %d pending", step, len(agents), len(pending))
    return WorldState(t=step * settings.dt, step=step, seed=seed, agents=agents, pending=pending)


@dataclass(frozen=True)
class _Move:
    position: np.ndarray
    road_id: str | None


def _plan_agent(
    index: int,
    agent: SimAgent,
    world: WorldState,
    graph: TrafficGraph,
    prediction: GaussianTrajectoryPrediction,
    network: RoadNetwork,
    settings: SimSettings,
) -> _Move:
    if settings.deterministic:
        local = prediction.mean[index]
    else:
        rng = counter_stream(world.seed, world.step, agent.id, Purpose.ACTION_SAMPLE)
        local = prediction.sample(index, rng)
    targets = to_global(graph.frame(index), local)

    road_id = None
    if settings.projection:
        hint = agent.route[agent.route_index : agent.route_index + 2]
        projected = [project_to_road(point, network, hint, settings.offroad_threshold) for point in targets]
        targets = np.array([p.position for p in projected])
        road_id = projected[0].road_id

    if settings.lqr:
        plan = lqr_smooth(agent.position, agent.velocity(settings.dt), targets, settings.dt, settings.lqr_accel_weight)
        return _Move(position=plan.positions[0], road_id=road_id)
    return _Move(position=np.array(targets[0]), road_id=road_id)


def _advance(agent: SimAgent, move: _Move, network: RoadNetwork, settings: SimSettings) -> SimAgent:
    history = np.vstack((agent.history, move.position[None, :]))[-_history_length(settings.graph) :]
    window = agent.route[agent.route_index : agent.route_index + 2]
    if move.road_id is not None and move.road_id in window:
        index = agent.route_index + window.index(move.road_id)
    else:
        index = route_progress(network, agent.route, move.position, agent.route_index)
    return replace(agent, history=history, route_index=index)


def sim_step(
    world: WorldState,
    policy: PolicyModel,
    network: RoadNetwork,
    settings: SimSettings | None = None,
) -> WorldState:
    """Advance the world by one step.

    Args:
        world: Current state
        policy: Driving policy
        network: Road network
        settings: Pipeline settings

    Returns:
        The next state; its `graph` is the graph this step was computed from
    """
    settings = settings or SimSettings()
    next_step = world.step + 1
    next_t = next_step * settings.dt

    # Phase 1: build the graph
    graph = build_graph(
        [agent.snapshot() for agent in world.agents],
        network,
        world.t,
        world.seed,
        world.step,
        settings.graph,
    )

    # Phase 2-8: predict, sample, project, smooth, advance
    moved: list[SimAgent] = []
    if world.agents:
        prediction = policy.predict(graph)

        def plan(index: int) -> _Move:
            return _plan_agent(index, world.agents[index], world, graph, prediction, network, settings)

        indices = range(len(world.agents))
        if settings.workers > 1:
            with ThreadPoolExecutor(max_workers=settings.workers) as executor:
                moves = list(executor.map(plan, indices))
        else:
            moves = [plan(index) for index in indices]
        moved = [_advance(agent, move, network, settings) for agent, move in zip(world.agents, moves)]

    # Phase 9: remove arrived agents, spawn scheduled ones
    kept = [
        agent
        for agent in moved
        if np.hypot(*(agent.position - agent.destination)) > settings.arrival_radius
        and next_t <= agent.last_time + settings.arrival_timeout
    ]
    removed = len(moved) - len(kept)

    active_ids = {agent.id for agent in kept}
    spawned = []
    pending = list(world.pending)
    while pending and pending[0].first_step <= next_step:
        record = pending.pop(0)
        if record.id in active_ids:
            continue
        spawned.append(agent_from_record(record, network, record.first_step, settings.graph))
        active_ids.add(record.id)

    agents = tuple(sorted(kept + spawned, key=lambda agent: agent.id))
    if removed or spawned:
        _LOGGER.debug("Step %d: removed %d, spawned %d, %d active", next_step, removed, len(spawned), len(agents))
    return WorldState(t=next_t, step=next_step, seed=world.seed, agents=agents, pending=tuple(pending), graph=graph)


class ReplayBuffer:
    """Graphs collected from policy rollouts.

    Attributes:
        capacity: Maximum number of graphs
        clears: How often the buffer has been emptied
        filled: Whether the buffer has ever been full
    """

    def __init__(self, capacity: int) -> None:
        """Initialize an empty buffer holding at most `capacity` graphs."""
        self.capacity = capacity
        self._graphs: deque[TrafficGraph] = deque(maxlen=max(capacity, 1))
        self.clears = 0
        self.filled = False

    def __len__(self) -> int:
        return len(self._graphs)

    @property
    def graphs(self) -> tuple[TrafficGraph, ...]:
        """Stored graphs, oldest first."""
        return tuple(self._graphs)

    def add(self, graph: TrafficGraph) -> None:
        """Append a graph, dropping the oldest when full."""
        self._graphs.append(graph)
        if len(self._graphs) >= self.capacity:
            self.filled = True

    def clear(self) -> None:
        """Empty the buffer."""
        self._graphs.clear()
        self.clears += 1

    def sample(self, rng: np.random.Generator, min_nodes: int = 1) -> TrafficGraph | None:
        """Merge randomly chosen non-empty graphs until `min_nodes` nodes are reached.

        Returns:
            Merged graph, or None if every stored graph is empty
        """
        candidates = [graph for graph in self._graphs if graph.num_nodes]
        if not candidates:
            return None
        chosen: list[TrafficGraph] = []
        nodes = 0
        for index in rng.permutation(len(candidates)):
            chosen.append(candidates[index])
            nodes += candidates[index].num_nodes
            if nodes >= min_nodes:
                break
        return merge_graphs(chosen)


def rollout(
    world: WorldState,
    steps: int,
    buffer: ReplayBuffer,
    policy: PolicyModel,
    network: RoadNetwork,
    settings: SimSettings | None = None,
) -> ReplayBuffer:
    """Run the policy with sampling for `steps` steps and store every graph.

    Returns:
        The buffer, grown by `steps` graphs
    """
    settings = replace(settings or SimSettings(), deterministic=False)
    for _ in range(steps):
        world = sim_step(world, policy, network, settings)
        if world.graph is not None:
            buffer.add(world.graph)
    return buffer


def agent_snapshot(record: AgentRecord, network: RoadNetwork, step: int, history_steps: int) -> AgentSnapshot:
    """Graph construction view of a recorded agent at a step."""
    history = record.history_until(step, history_steps)
    return AgentSnapshot(
        id=record.id,
        vehicle_type=record.vehicle_type,
        history=history,
        route=record.route,
        route_index=route_progress(network, record.route, history[-1], 0, None),
        destination=record.destination,
    )


def expert_sample(
    dataset: TrajectoryDataset,
    network: RoadNetwork,
    step: int,
    graph_config: GraphConfig,
    future_steps: int,
    seed: int,
) -> GraphSample:
    """Build the supervised graph of all recorded agents at a step.

    Futures are the recorded next positions; steps after an agent's last
    record are masked.
    """
    records = [record for record in dataset.active_at(step) if record.route]
    snapshots = [agent_snapshot(record, network, step, graph_config.history_steps) for record in records]
    graph = build_graph(snapshots, network, step * dataset.dt, seed, step, graph_config)
    futures = []
    for record in records:
        start = step + 1 - record.first_step
        future = record.positions[start : start + future_steps]
        futures.append(future if len(future) else None)
    return future_targets(graph, futures, future_steps)


class ExpertSampler:
    """Draws expert batches from the recorded steps with supervision.

    Attributes:
        steps: Dataset steps with at least one agent that has a future
    """

    def __init__(
        self,
        dataset: TrajectoryDataset,
        network: RoadNetwork,
        graph_config: GraphConfig,
        future_steps: int,
        batch_size: int,
        seed: int,
    ) -> None:
        """Initialize the sampler.

        Raises:
            DataError: If no step has a supervised agent
        """
        self.dataset = dataset
        self.network = network
        self.graph_config = graph_config
        self.future_steps = future_steps
        self.batch_size = batch_size
        self.seed = seed
        supervised = [
            step
            for step in range(dataset.first_step, dataset.last_step)
            if any(record.route and record.active_at(step) and step < record.last_step for record in dataset.agents)
        ]
        if not supervised:
            raise DataError("dataset too small to form a batch: no step has an agent with a future")
        self.steps = np.asarray(supervised, dtype=np.int64)

    def batch(self, train_step: int) -> GraphSample:
        """Return a merged sample with at least `batch_size` supervised agents."""
        rng = step_stream(self.seed, train_step, Purpose.BATCH)
        graph_seed = derive_seed(self.seed, train_step, Purpose.BATCH)
        samples: list[GraphSample] = []
        supervised = 0
        while supervised < self.batch_size:
            step = int(rng.choice(self.steps))
            sample = expert_sample(self.dataset, self.network, step, self.graph_config, self.future_steps, graph_seed)
            samples.append(sample)
            supervised += sample.supervised_nodes
        return merge_samples(samples)


def build_models(
    config: RunConfig,
    store: ParamStore | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[ParamStore, PolicyModel, CvaeModel | None]:
    """Create (or attach to) the policy and, when augmenting, the VAE."""
    store = store if store is not None else ParamStore()
    rng = rng or step_stream(config.seed, 0, Purpose.INIT)
    context = config.graph_config.context_size
    policy = PolicyModel(
        store,
        config.hidden_size,
        config.history_steps,
        context,
        config.future_steps,
        config.policy_layers,
        rng,
    )
    vae = None
    if config.augment:
        vae = CvaeModel(
            store,
            config.hidden_size,
            config.latent_dim,
            config.history_steps,
            context,
            config.encoder_layers,
            config.decoder_layers,
            config.context_conditioned,
            rng,
        )
    return store, policy, vae


def checkpoint_meta(config: RunConfig, train_step: int) -> dict[str, Any]:
    """Model settings stored with a checkpoint."""
    return {
        "augment": config.augment,
        "context_conditioned": config.context_conditioned,
        "decoder_layers": config.decoder_layers,
        "encoder_layers": config.encoder_layers,
        "future_steps": config.future_steps,
        "hidden_size": config.hidden_size,
        "history_steps": config.history_steps,
        "latent_dim": config.latent_dim,
        "policy_layers": config.policy_layers,
        "route_points": config.route_points,
        "train_step": train_step,
    }


def load_policy(path: str | Path, config: RunConfig) -> tuple[PolicyModel, RunConfig]:
    """Load a checkpoint and rebuild the policy with its stored settings.

    Returns:
        Tuple of (policy, config with the checkpoint's model settings)
    """
    checkpoint = CheckpointStore(path)
    store = checkpoint.load()
    meta = {key: value for key, value in checkpoint.meta.items() if key != "train_step"}
    config = config.with_overrides(**meta)
    _, policy, _ = build_models(config, store)
    return policy, config


@dataclass
class TrainResult:
    """Outcome of a training run.

    Attributes:
        store: Trained parameters
        losses: One row per training step (see LOSS_COLUMNS)
        checkpoint: Last written checkpoint, if any
        buffer_clears: Training steps at which the replay buffer was emptied
    """

    store: ParamStore
    losses: list[dict[str, float | int | None]] = field(default_factory=list)
    checkpoint: Path | None = None
    buffer_clears: list[int] = field(default_factory=list)


def _check_finite(train_step: int, values: Iterable[float | None]) -> None:
    for value in values:
        if value is not None and not np.isfinite(value):
            _LOGGER.error("Non-finite loss at training step %d", train_step)
            raise NumericalError(f"non-finite loss at training step {train_step}")


def train(
    dataset: TrajectoryDataset,
    network: RoadNetwork,
    config: RunConfig,
    output_dir: str | Path | None = None,
) -> TrainResult:
    """Train the policy and the VAE.

    Each step draws an expert batch, augments it with the VAE, takes a policy
    step and then a VAE step on the expert batch and a learner batch from the
    replay buffer. Every `sim_interval` steps the buffer is emptied and
    refilled with a `sim_length` step rollout from a random recorded step.
    Without augmentation no VAE is trained and no rollouts are run.

    Args:
        dataset: Expert trajectories with routes
        network: Road network
        config: Run configuration
        output_dir: Directory for the checkpoint and losses.csv, None to skip files

    Returns:
        Training result

    Raises:
        DataError: If the dataset cannot form a batch
        NumericalError: If a loss becomes non-finite
    """
    settings = SimSettings.from_config(config)
    store, policy, vae = build_models(config)
    sampler = ExpertSampler(dataset, network, config.graph_config, config.future_steps, config.batch_size, config.seed)
    buffer = ReplayBuffer(config.sim_length)
    result = TrainResult(store=store)

    out = Path(output_dir) if output_dir is not None else None
    checkpoint_path = None
    if config.checkpoint is not None:
        checkpoint_path = Path(config.checkpoint)
    elif out is not None:
        checkpoint_path = out / "checkpoint.json"

    _LOGGER.info(
        "Training for %d steps: %d parameters, augmentation %s",
        config.train_steps,
        len(store),
        "on" if vae is not None else "off",
    )
    for train_step in range(1, config.train_steps + 1):
        # Phase 1: expert batch
        sample = sampler.batch(train_step)
        rng = step_stream(config.seed, train_step, Purpose.AUGMENT_LATENT)

        # Phase 2: learner-aware augmentation
        policy_sample = sample
        if vae is not None:
            augmented = augment_expert(vae, sample.graph, rng, config.sample_augmented_past)
            policy_sample = GraphSample(graph=augmented, futures=sample.futures, mask=sample.mask)

        # Phase 3: policy step
        nll = policy_train_step(policy, policy_sample, config.learning_rate)

        # Phase 4: VAE step
        vae_losses: VaeLosses | None = None
        if vae is not None:
            learner = buffer.sample(rng, config.batch_size) if buffer.filled else None
            vae_losses = vae_train_step(vae, sample.graph, learner, config.learner_vae_weight, rng, config.learning_rate)

        row: dict[str, float | int | None] = {
            "step": train_step,
            "policy_nll": nll,
            "vae_expert_recon": None if vae_losses is None else vae_losses.expert_recon,
            "vae_expert_kl": None if vae_losses is None else vae_losses.expert_kl,
            "vae_learner_recon": None if vae_losses is None else vae_losses.learner_recon,
            "vae_learner_kl": None if vae_losses is None else vae_losses.learner_kl,
            "buffer_size": len(buffer),
        }
        _check_finite(train_step, [value for key, value in row.items() if key not in ("step", "buffer_size")])
        result.losses.append(row)

        # Phase 5: refill the replay buffer
        if vae is not None and config.sim_interval > 0 and train_step % config.sim_interval == 0:
            buffer.clear()
            result.buffer_clears.append(train_step)
            start = int(step_stream(config.seed, train_step, Purpose.ROLLOUT_START).choice(sampler.steps))
            world = initial_world(
                dataset, network, start, derive_seed(config.seed, train_step, Purpose.ROLLOUT_START), settings
            )
            rollout(world, config.sim_length, buffer, policy, network, settings)
            _LOGGER.info("Step %d: replay buffer refilled from step %d with %d graphs", train_step, start, len(buffer))

        # Phase 6: checkpoint
        due = config.checkpoint_every > 0 and train_step % config.checkpoint_every == 0
        if checkpoint_path is not None and (due or train_step == config.train_steps):
            CheckpointStore(checkpoint_path).save(store, checkpoint_meta(config, train_step))
            result.checkpoint = checkpoint_path

    if checkpoint_path is not None and config.train_steps == 0:
        CheckpointStore(checkpoint_path).save(store, checkpoint_meta(config, 0))
        result.checkpoint = checkpoint_path
    if out is not None:
        write_losses(result.losses, out / "losses.csv")
    return result


def write_losses(losses: Sequence[dict[str, Any]], path: str | Path) -> None:
    """Write loss rows as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(losses), columns=list(LOSS_COLUMNS))
    frame.to_csv(path, index=False, float_format="%.10g")


@dataclass(frozen=True, eq=False)
class SimulationResult:
    """Trace and per-step metrics of a simulation run.

    Attributes:
        trace: Simulated trajectories on the dt grid
        metrics: One row per step
    """

    trace: TrajectoryDataset
    metrics: list[dict[str, Any]]


def simulate(
    dataset: TrajectoryDataset,
    network: RoadNetwork,
    policy: PolicyModel,
    settings: SimSettings,
    start_step: int,
    steps: int,
    seed: int,
) -> SimulationResult:
    """Run the policy closed-loop from a recorded step.

    Args:
        dataset: Recorded trajectories providing initial agents and spawns
        network: Road network
        policy: Driving policy
        settings: Pipeline settings
        start_step: Recorded step to start from
        steps: Number of steps
        seed: Seed of the run's random streams

    Returns:
        Trace and metrics
    """
    world = initial_world(dataset, network, start_step, seed, settings)
    tracks: dict[str, tuple[str, int, list[np.ndarray], tuple[str, ...]]] = {}
    metrics: list[dict[str, Any]] = []

    def record(state: WorldState) -> None:
        for agent in state.agents:
            entry = tracks.setdefault(agent.id, (agent.vehicle_type, state.step, [], agent.route))
            entry[2].append(np.array(agent.position))

    def measure(state: WorldState, previous: WorldState | None) -> dict[str, Any]:
        before = {} if previous is None else {agent.id: agent.position for agent in previous.agents}
        speeds = [
            float(np.hypot(*(agent.position - before[agent.id]))) / settings.dt
            for agent in state.agents
            if agent.id in before
        ]
        offroad = sum(
            1 for agent in state.agents if offroad_distance(agent.position, network) > settings.offroad_threshold
        )
        return {
            "step": state.step,
            "t": round(state.t, 6),
            "agents": len(state.agents),
            "offroad": offroad,
            "mean_speed": float(np.mean(speeds)) if speeds else None,
        }

    record(world)
    metrics.append(measure(world, None))
    for _ in range(steps):
        previous = world
        world = sim_step(world, policy, network, settings)
        record(world)
        metrics.append(measure(world, previous))

    agents = tuple(
        AgentRecord(
            id=agent_id,
            vehicle_type=vehicle_type,
            first_step=first_step,
            dt=settings.dt,
            positions=np.array(positions),
            route=route,
        )
        for agent_id, (vehicle_type, first_step, positions, route) in sorted(tracks.items())
    )
    _LOGGER.info("Simulated %d steps from step %d: %d agents seen", steps, start_step, len(agents))
    return SimulationResult(trace=TrajectoryDataset(dt=settings.dt, agents=agents), metrics=metrics)


def write_metrics(metrics: Iterable[dict[str, Any]], path: str | Path) -> None:
    """Write per-step metrics as JSON lines with sorted keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for row in metrics:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
