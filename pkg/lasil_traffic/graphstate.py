"""Per-step multi-agent graph construction.

Every agent gets its own coordinate frame: the origin is its current
position plus Gaussian noise and the x axis points at its destination.
Node features (past trajectory and context) are expressed in that frame;
an edge i -> j carries the origin of j's frame expressed in i's frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .const import (
    DEFAULT_HISTORY_STEPS,
    DEFAULT_NEIGHBOR_COUNT,
    DEFAULT_NEIGHBOR_MAX_DISTANCE,
    DEFAULT_ORIGIN_PERTURBATION_STD,
    DEFAULT_ROUTE_POINT_INTERVAL,
    DEFAULT_ROUTE_POINTS,
    DESTINATION_SCALE,
    POSITION_SCALE,
    VEHICLE_TYPES,
    WIDTH_SCALE,
)
from .roadnet import LightState, RoadNetwork, road_light_state, waypoints_along_route
from .streams import Purpose, counter_stream

_LOGGER = logging.getLogger(__name__)

LIGHT_CHANNELS = (LightState.GREEN, LightState.RED, LightState.NONE)

# Below this distance the destination gives no direction (m)
_DEGENERATE_DISTANCE = 1e-9


def context_size(route_points: int = DEFAULT_ROUTE_POINTS) -> int:
    """Length of the context vector: type one-hot, waypoints, light, destination."""
    return len(VEHICLE_TYPES) + 3 * route_points + len(LIGHT_CHANNELS) + 2


@dataclass(frozen=True)
class GraphConfig:
    """Feature and topology settings of the traffic graph."""

    history_steps: int = DEFAULT_HISTORY_STEPS
    route_points: int = DEFAULT_ROUTE_POINTS
    route_point_interval: float = DEFAULT_ROUTE_POINT_INTERVAL
    neighbor_count: int = DEFAULT_NEIGHBOR_COUNT
    neighbor_max_distance: float = DEFAULT_NEIGHBOR_MAX_DISTANCE
    origin_perturbation_std: float = DEFAULT_ORIGIN_PERTURBATION_STD

    @property
    def context_size(self) -> int:
        """Length of the context vector."""
        return context_size(self.route_points)


@dataclass(frozen=True)
class AgentFrame:
    """Local coordinate frame of one agent.

    Attributes:
        origin: Frame origin in global coordinates
        rotation: Angle of the local x axis (rad)
    """

    origin: np.ndarray
    rotation: float

    @property
    def matrix(self) -> np.ndarray:
        """Rotation taking local vectors to global vectors."""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return np.array([[c, -s], [s, c]])


def to_local(frame: AgentFrame, point: np.ndarray) -> np.ndarray:
    """Express global points (..., 2) in the frame."""
    return (np.asarray(point, dtype=np.float64) - frame.origin) @ frame.matrix


def to_global(frame: AgentFrame, point: np.ndarray) -> np.ndarray:
    """Express local points (..., 2) in global coordinates."""
    return np.asarray(point, dtype=np.float64) @ frame.matrix.T + frame.origin


@dataclass(frozen=True, eq=False)
class AgentSnapshot:
    """What graph construction needs to know about one agent.

    Attributes:
        id: Agent identifier
        vehicle_type: One of VEHICLE_TYPES
        history: Known positions, oldest first, current last, shape (k, 2)
        route: Full route
        route_index: Index of the road the agent is on
        destination: Final route point used for the frame direction
    """

    id: str
    vehicle_type: str
    history: np.ndarray
    route: tuple[str, ...]
    route_index: int
    destination: np.ndarray

    @property
    def position(self) -> np.ndarray:
        """Current position."""
        return self.history[-1]

    @property
    def current_road(self) -> str:
        """Road the agent is on."""
        return self.route[min(self.route_index, len(self.route) - 1)]


def route_destination(network: RoadNetwork, route: Sequence[str]) -> np.ndarray:
    """Return the final point of a route along lane 0."""
    return network.route_path(route, 0).vertices[-1].copy()


@dataclass(frozen=True)
class NodeState:
    """Features of one node.

    Attributes:
        past: Local positions, oldest first, shape (H, 2)
        context: Context vector
    """

    past: np.ndarray
    context: np.ndarray


@dataclass(frozen=True, eq=False)
class TrafficGraph:
    """Multi-agent state at one step.

    Edges are sorted by source node. Each node has a self-edge.

    Attributes:
        agent_ids: Node order
        past: Local past positions, shape (n, H, 2)
        context: Context vectors, shape (n, C)
        origins: Frame origins in global coordinates, shape (n, 2)
        rotations: Frame angles, shape (n,)
        edge_src: Aggregating node of each edge
        edge_dst: Neighbor node of each edge
        edge_feat: Neighbor origin in the aggregating node's frame, shape (E, 2)
    """

    agent_ids: tuple[str, ...]
    past: np.ndarray
    context: np.ndarray
    origins: np.ndarray
    rotations: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_feat: np.ndarray

    @property
    def num_nodes(self) -> int:
        """Number of nodes."""
        return len(self.agent_ids)

    @property
    def num_edges(self) -> int:
        """Number of edges including self-edges."""
        return int(self.edge_src.size)

    def frame(self, index: int) -> AgentFrame:
        """Frame of a node."""
        return AgentFrame(origin=self.origins[index], rotation=float(self.rotations[index]))

    def node(self, index: int) -> NodeState:
        """Features of a node."""
        return NodeState(past=self.past[index], context=self.context[index])

    @property
    def route_points(self) -> int:
        """Waypoints per context vector."""
        return (self.context.shape[1] - len(VEHICLE_TYPES) - len(LIGHT_CHANNELS) - 2) // 3

    def scaled_past(self) -> np.ndarray:
        """Scaled past trajectories flattened per node, shape (n, 2H)."""
        return self.past.reshape(self.num_nodes, -1) / POSITION_SCALE

    def scaled_context(self) -> np.ndarray:
        """Scaled context per node, shape (n, C)."""
        return scale_context(self.context, self.route_points)

    def node_inputs(self) -> np.ndarray:
        """Scaled network input [past ‖ context] per node, shape (n, 2H + C)."""
        return np.concatenate((self.scaled_past(), self.scaled_context()), axis=1)

    def edge_inputs(self) -> np.ndarray:
        """Scaled edge features, shape (E, 2)."""
        return self.edge_feat / POSITION_SCALE

    def with_past(self, past: np.ndarray) -> TrafficGraph:
        """Return a graph with replaced past trajectories and everything else shared."""
        if past.shape != self.past.shape:
            raise ValueError(f"past shape {past.shape} != {self.past.shape}")
        return TrafficGraph(
            agent_ids=self.agent_ids,
            past=past,
            context=self.context,
            origins=self.origins,
            rotations=self.rotations,
            edge_src=self.edge_src,
            edge_dst=self.edge_dst,
            edge_feat=self.edge_feat,
        )

    def permuted(self, order: Sequence[int]) -> TrafficGraph:
        """Return the same graph with nodes listed in `order`."""
        order_array = np.asarray(order, dtype=np.int64)
        inverse = np.empty_like(order_array)
        inverse[order_array] = np.arange(order_array.size)
        src, dst = inverse[self.edge_src], inverse[self.edge_dst]
        edge_order = np.lexsort((dst, src))
        return TrafficGraph(
            agent_ids=tuple(self.agent_ids[i] for i in order_array),
            past=self.past[order_array],
            context=self.context[order_array],
            origins=self.origins[order_array],
            rotations=self.rotations[order_array],
            edge_src=src[edge_order],
            edge_dst=dst[edge_order],
            edge_feat=self.edge_feat[edge_order],
        )


def scale_context(context: np.ndarray, route_points: int = DEFAULT_ROUTE_POINTS) -> np.ndarray:
    """Scale raw context vectors to network input ranges."""
    scaled = np.array(context, dtype=np.float64, copy=True)
    start = len(VEHICLE_TYPES)
    waypoints = scaled[:, start : start + 3 * route_points].reshape(-1, route_points, 3)
    waypoints[..., :2] /= POSITION_SCALE
    waypoints[..., 2] /= WIDTH_SCALE
    scaled[:, start : start + 3 * route_points] = waypoints.reshape(-1, 3 * route_points)
    scaled[:, -2:] /= DESTINATION_SCALE
    return scaled


@dataclass(frozen=True, eq=False)
class GraphSample:
    """A graph with supervision targets.

    Attributes:
        graph: Input graph
        futures: Ground-truth future positions in each node's frame, shape (n, T, 2)
        mask: Whether each future step is known, shape (n, T)
    """

    graph: TrafficGraph
    futures: np.ndarray
    mask: np.ndarray

    @property
    def supervised_nodes(self) -> int:
        """Nodes with at least one known future step."""
        return int(np.count_nonzero(self.mask.any(axis=1)))


def frame_rotation(agent: AgentSnapshot) -> float:
    """Return the frame angle for an agent.

    Points at the destination; falls back to the heading of the last two
    history points, then to 0.
    """
    direction = agent.destination - agent.position
    if np.hypot(*direction) > _DEGENERATE_DISTANCE:
        return float(np.arctan2(direction[1], direction[0]))
    if agent.history.shape[0] >= 2:
        heading = agent.history[-1] - agent.history[-2]
        if np.hypot(*heading) > _DEGENERATE_DISTANCE:
            return float(np.arctan2(heading[1], heading[0]))
    return 0.0


def pad_history(history: np.ndarray, length: int) -> np.ndarray:
    """Return exactly `length` positions, front-padded with the oldest one."""
    history = np.asarray(history, dtype=np.float64)
    if history.shape[0] >= length:
        return history[-length:]
    padding = np.repeat(history[:1], length - history.shape[0], axis=0)
    return np.concatenate((padding, history), axis=0)


def nearest_neighbors(
    positions: np.ndarray,
    agent_ids: Sequence[str],
    count: int = DEFAULT_NEIGHBOR_COUNT,
    max_distance: float = DEFAULT_NEIGHBOR_MAX_DISTANCE,
) -> list[list[int]]:
    """Return up to `count` other agents within `max_distance` for every agent.

    Ties are broken by agent id.
    """
    n = positions.shape[0]
    if n == 0:
        return []
    distances = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    id_rank = np.empty(n, dtype=np.int64)
    id_rank[np.argsort(np.asarray(agent_ids, dtype=object), kind="stable")] = np.arange(n)
    result = []
    for i in range(n):
        candidates = [j for j in range(n) if j != i and distances[i, j] <= max_distance]
        candidates.sort(key=lambda j: (distances[i, j], id_rank[j]))
        result.append(candidates[:count])
    return result


def build_graph(
    agents: Sequence[AgentSnapshot],
    network: RoadNetwork,
    t: float,
    seed: int,
    step: int,
    config: GraphConfig | None = None,
    perturbations: np.ndarray | None = None,
) -> TrafficGraph:
    """Build the traffic graph of one step.

    Args:
        agents: Agents in node order
        network: Road network for waypoints and signals
        t: Time (s) for signal states
        seed: Run seed of the per-agent origin perturbation streams
        step: Step of the per-agent origin perturbation streams
        config: Feature settings
        perturbations: Explicit origin offsets (n, 2), overriding the streams

    Returns:
        The graph
    """
    config = config or GraphConfig()
    n = len(agents)
    h = config.history_steps
    c = config.context_size

    if perturbations is None:
        perturbations = np.zeros((n, 2))
        if config.origin_perturbation_std > 0.0:
            for i, agent in enumerate(agents):
                rng = counter_stream(seed, step, agent.id, Purpose.ORIGIN_PERTURBATION)
                perturbations[i] = rng.normal(0.0, config.origin_perturbation_std, size=2)

    positions = np.array([agent.position for agent in agents], dtype=np.float64).reshape(n, 2)
    origins = positions + perturbations
    rotations = np.array([frame_rotation(agent) for agent in agents], dtype=np.float64)

    past = np.zeros((n, h, 2))
    context = np.zeros((n, c))
    type_offset = len(VEHICLE_TYPES)
    light_offset = type_offset + 3 * config.route_points
    for i, agent in enumerate(agents):
        frame = AgentFrame(origin=origins[i], rotation=float(rotations[i]))
        past[i] = to_local(frame, pad_history(agent.history, h))

        context[i, VEHICLE_TYPES.index(agent.vehicle_type)] = 1.0
        remaining = agent.route[min(agent.route_index, len(agent.route) - 1) :]
        waypoints = waypoints_along_route(
            network, remaining, agent.position, config.route_point_interval, config.route_points
        )
        block = np.column_stack((to_local(frame, waypoints.points), waypoints.widths))
        context[i, type_offset:light_offset] = block.reshape(-1)
        light = road_light_state(network, agent.current_road, t)
        context[i, light_offset + LIGHT_CHANNELS.index(light)] = 1.0
        context[i, -2:] = to_local(frame, agent.destination)

    neighbors = nearest_neighbors(
        positions, [agent.id for agent in agents], config.neighbor_count, config.neighbor_max_distance
    )
    src_list: list[int] = []
    dst_list: list[int] = []
    for i in range(n):
        for j in sorted([i, *neighbors[i]]):
            src_list.append(i)
            dst_list.append(j)
    edge_src = np.asarray(src_list, dtype=np.int64)
    edge_dst = np.asarray(dst_list, dtype=np.int64)
    edge_feat = np.zeros((edge_src.size, 2))
    for k, (i, j) in enumerate(zip(src_list, dst_list)):
        if i != j:
            edge_feat[k] = to_local(AgentFrame(origin=origins[i], rotation=float(rotations[i])), origins[j])

    return TrafficGraph(
        agent_ids=tuple(agent.id for agent in agents),
        past=past,
        context=context,
        origins=origins,
        rotations=rotations,
        edge_src=edge_src,
        edge_dst=edge_dst,
        edge_feat=edge_feat,
    )


def future_targets(
    graph: TrafficGraph,
    futures: Sequence[np.ndarray | None],
    horizon: int,
) -> GraphSample:
    """Attach ground-truth futures to a graph.

    Args:
        graph: Input graph
        futures: Per node, global future positions (k ≤ horizon, 2) or None
        horizon: Number of future steps T

    Returns:
        Sample with futures in each node's frame and a mask of known steps
    """
    targets = np.zeros((graph.num_nodes, horizon, 2))
    mask = np.zeros((graph.num_nodes, horizon), dtype=bool)
    for i, future in enumerate(futures):
        if future is None or len(future) == 0:
            continue
        known = min(len(future), horizon)
        targets[i, :known] = to_local(graph.frame(i), np.asarray(future[:known]))
        mask[i, :known] = True
    return GraphSample(graph=graph, futures=targets, mask=mask)


def merge_graphs(graphs: Sequence[TrafficGraph]) -> TrafficGraph:
    """Return the disjoint union of graphs, nodes in input order."""
    if not graphs:
        raise ValueError("no graphs to merge")
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs[:-1]])
    return TrafficGraph(
        agent_ids=tuple(agent_id for g in graphs for agent_id in g.agent_ids),
        past=np.concatenate([g.past for g in graphs]),
        context=np.concatenate([g.context for g in graphs]),
        origins=np.concatenate([g.origins for g in graphs]),
        rotations=np.concatenate([g.rotations for g in graphs]),
        edge_src=np.concatenate([g.edge_src + off for g, off in zip(graphs, offsets)]),
        edge_dst=np.concatenate([g.edge_dst + off for g, off in zip(graphs, offsets)]),
        edge_feat=np.concatenate([g.edge_feat for g in graphs]),
    )


def merge_samples(samples: Sequence[GraphSample]) -> GraphSample:
    """Return the disjoint union of samples."""
    return GraphSample(
        graph=merge_graphs([s.graph for s in samples]),
        futures=np.concatenate([s.futures for s in samples]),
        mask=np.concatenate([s.mask for s in samples]),
    )
