"""Trajectory data for the LASIL traffic simulator.

Handles everything that produces or consumes recorded agent motion:
- Loading and saving the id,type,t,x,y CSV format with resampling to dt
- Route inference by connectivity-constrained nearest-road matching
- Synthetic expert generation with IDM car following and fixed-time signals
- Poisson spawn schedules and demand files
- Fixed-time signal estimation from stop and start events
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd

from .const import (
    DEFAULT_DT,
    DEFAULT_HISTORY_STEPS,
    DEFAULT_OFFROAD_THRESHOLD,
    MIN_ONSET_EVENTS,
    OFFSET_RESOLUTION,
    ONSET_MATCH_TOLERANCE,
    ONSET_MIN_GAP,
    ROUTE_MAX_DEVIATION,
    ROUTE_START_MAX_DISTANCE,
    SIGNAL_CYCLES,
    STOP_LINE_RADIUS,
    STOP_SPEED_THRESHOLD,
    VEHICLE_LENGTH,
    VEHICLE_TYPES,
)
from .exceptions import TrajectoryFormatError, UnknownRoadError, UnroutableAgentError
from .idm import IdmController, IdmParams, default_idm_params
from .roadnet import LightState, RoadNetwork, RoutePath, SignalSchedule, road_light_state
from .types import DemandEntryDict

_LOGGER = logging.getLogger(__name__)

CSV_COLUMNS = ("id", "type", "t", "x", "y")

# Grid snapping tolerance in units of dt
_GRID_EPSILON = 1e-9


@dataclass(frozen=True, eq=False)
class AgentRecord:
    """Positions of one agent on the dt grid.

    Attributes:
        id: Agent identifier
        vehicle_type: One of VEHICLE_TYPES
        first_step: Grid index of the first sample (time = first_step * dt)
        dt: Grid spacing (s)
        positions: Positions at consecutive grid steps, shape (n, 2)
        route: Road ids in driving order
    """

    id: str
    vehicle_type: str
    first_step: int
    dt: float
    positions: np.ndarray
    route: tuple[str, ...] = ()

    @property
    def last_step(self) -> int:
        """Grid index of the last sample."""
        return self.first_step + self.positions.shape[0] - 1

    @property
    def first_time(self) -> float:
        """Time of the first sample (s)."""
        return self.first_step * self.dt

    @property
    def last_time(self) -> float:
        """Time of the last sample (s)."""
        return self.last_step * self.dt

    @property
    def times(self) -> np.ndarray:
        """Sample times (s)."""
        return np.arange(self.first_step, self.last_step + 1) * self.dt

    @property
    def destination(self) -> np.ndarray:
        """Final recorded position."""
        return self.positions[-1]

    def active_at(self, step: int) -> bool:
        """Return whether the agent has a sample at a step."""
        return self.first_step <= step <= self.last_step

    def position_at(self, step: int) -> np.ndarray:
        """Return the position at a step (must be active)."""
        return self.positions[step - self.first_step]

    def history_until(self, step: int, length: int) -> np.ndarray:
        """Return up to `length` positions ending at `step`, oldest first."""
        end = step - self.first_step + 1
        return self.positions[max(0, end - length) : end]


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Agents recorded on a shared dt grid.

    Attributes:
        dt: Grid spacing (s)
        agents: Agent records, ordered by id
    """

    dt: float
    agents: tuple[AgentRecord, ...]

    @cached_property
    def _by_id(self) -> dict[str, AgentRecord]:
        return {agent.id: agent for agent in self.agents}

    def agent(self, agent_id: str) -> AgentRecord:
        """Return an agent by id."""
        return self._by_id[agent_id]

    def __contains__(self, agent_id: object) -> bool:
        return agent_id in self._by_id

    def __len__(self) -> int:
        return len(self.agents)

    @property
    def first_step(self) -> int:
        """Earliest grid step with any agent."""
        return min((agent.first_step for agent in self.agents), default=0)

    @property
    def last_step(self) -> int:
        """Latest grid step with any agent."""
        return max((agent.last_step for agent in self.agents), default=-1)

    def active_at(self, step: int) -> list[AgentRecord]:
        """Return the agents with a sample at a step, in id order."""
        return [agent for agent in self.agents if agent.active_at(step)]

    def positions_at(self, step: int) -> dict[str, np.ndarray]:
        """Return {agent id: position} at a step."""
        return {agent.id: agent.position_at(step) for agent in self.agents if agent.active_at(step)}


@dataclass(frozen=True)
class DemandEntry:
    """One spawn request.

    Attributes:
        spawn_time: Requested entry time (s)
        route: Road ids in driving order
        vehicle_type: One of VEHICLE_TYPES
        speed: Entry speed (m/s); None uses the desired speed
        id: Agent id; None assigns one from the schedule position
    """

    spawn_time: float
    route: tuple[str, ...]
    vehicle_type: str = "car"
    speed: float | None = None
    id: str | None = None

    def to_dict(self) -> DemandEntryDict:
        """Serialize the entry to its JSON shape."""
        result: DemandEntryDict = {
            "spawn_time": float(self.spawn_time),
            "route": list(self.route),
            "type": self.vehicle_type,
        }
        if self.speed is not None:
            result["speed"] = float(self.speed)
        if self.id is not None:
            result["id"] = self.id
        return result


@dataclass(frozen=True)
class LightEstimate:
    """Result of signal estimation for one road.

    Attributes:
        road_id: Signaled road
        schedule: Estimated schedule, None if unestimated
        cost: Matching cost of the chosen green onsets (0 if unestimated)
        onset_count: Candidate green-onset events found
    """

    road_id: str
    schedule: SignalSchedule | None
    cost: float
    onset_count: int


def _check_vehicle_type(vehicle_type: str, where: str) -> None:
    if vehicle_type not in VEHICLE_TYPES:
        raise TrajectoryFormatError(f"{where}: unknown vehicle type {vehicle_type!r}")


def resample(times: np.ndarray, positions: np.ndarray, dt: float) -> tuple[int, np.ndarray]:
    """Linearly resample a track onto the dt grid.

    Args:
        times: Strictly increasing sample times (s)
        positions: Positions at those times, shape (n, 2)
        dt: Grid spacing (s)

    Returns:
        Tuple of (first grid step, resampled positions); empty if no grid
        time falls inside the track
    """
    first = math.ceil(times[0] / dt - _GRID_EPSILON)
    last = math.floor(times[-1] / dt + _GRID_EPSILON)
    if last < first:
        return first, np.empty((0, 2))
    grid = np.arange(first, last + 1) * dt
    x = np.interp(grid, times, positions[:, 0])
    y = np.interp(grid, times, positions[:, 1])
    return first, np.column_stack((x, y))


def infer_route(positions: np.ndarray, network: RoadNetwork, agent_id: str | None = None) -> tuple[str, ...]:
    """Infer the roads an agent drove along.

    The first road is the nearest road to the first position. Afterwards
    only successors of the current road are candidates; the agent moves on
    when a successor is strictly closer than the current road and within
    the maximum deviation. Roads are never revisited.

    Args:
        positions: Positions in time order, shape (n, 2)
        network: Road network
        agent_id: Used in error messages

    Returns:
        Route as road ids

    Raises:
        UnroutableAgentError: If no road is near the first position
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] == 0:
        raise UnroutableAgentError("agent has no positions", agent_id)

    start = network.project(positions[0])
    if start.distance_moved > ROUTE_START_MAX_DISTANCE:
        raise UnroutableAgentError(
            f"agent {agent_id}: no road within {ROUTE_START_MAX_DISTANCE} m of first position "
            f"(nearest {start.distance_moved:.1f} m)",
            agent_id,
        )

    route = [start.road_id]
    current = start.road_id
    for point in positions[1:]:
        successors = network.road(current).successors
        if not successors:
            continue
        here = network.project_on_roads(point, [current])
        current_distance = here.distance_moved if here is not None else math.inf
        best_id, best_distance = None, math.inf
        for successor in sorted(successors):
            if successor in route:
                continue
            candidate = network.project_on_roads(point, [successor])
            if candidate is not None and candidate.distance_moved < best_distance:
                best_id, best_distance = successor, candidate.distance_moved
        if best_id is not None and best_distance < current_distance and best_distance <= ROUTE_MAX_DEVIATION:
            current = best_id
            route.append(current)
    return tuple(route)


def load_trajectories(
    path: str | Path,
    network: RoadNetwork,
    dt: float = DEFAULT_DT,
    history_steps: int = DEFAULT_HISTORY_STEPS,
    keep_all: bool = False,
) -> TrajectoryDataset:
    """Load a trajectory CSV and resample it onto the dt grid.

    Agents with fewer than 2 * history_steps resampled positions and
    agents that cannot be routed are dropped with a warning, unless
    `keep_all` is set: then every agent with a grid sample is kept and
    unroutable agents get an empty route.

    Args:
        path: CSV file with header id,type,t,x,y
        network: Network used for route inference
        dt: Grid spacing (s)
        history_steps: History length of the model
        keep_all: Keep short and unroutable agents

    Returns:
        Dataset with routed agents in id order

    Raises:
        TrajectoryFormatError: On malformed rows, unknown types or non-increasing times
    """
    source = str(path)
    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise TrajectoryFormatError(f"{source}: cannot read trajectories: {err}") from err

    columns = [str(column).strip() for column in frame.columns]
    if columns[: len(CSV_COLUMNS)] != list(CSV_COLUMNS):
        raise TrajectoryFormatError(f"{source}: expected header {','.join(CSV_COLUMNS)}, got {','.join(columns)}")
    frame.columns = columns

    numeric = frame[["t", "x", "y"]].apply(pd.to_numeric, errors="coerce")
    invalid = ~np.isfinite(numeric.to_numpy(dtype=np.float64)).all(axis=1)
    invalid |= (frame["id"].str.strip() == "").to_numpy()
    if invalid.any():
        row = int(np.flatnonzero(invalid)[0])
        # Header is line 1
        raise TrajectoryFormatError(f"{source}: row {row + 2}: malformed row")
    unknown = ~frame["type"].isin(VEHICLE_TYPES)
    if unknown.any():
        row = int(np.flatnonzero(unknown.to_numpy())[0])
        raise TrajectoryFormatError(f"{source}: row {row + 2}: unknown vehicle type {frame['type'].iloc[row]!r}")

    frame = frame.assign(t=numeric["t"], x=numeric["x"], y=numeric["y"])
    agents: list[AgentRecord] = []
    min_samples = 1 if keep_all else 2 * history_steps
    dropped_short = 0
    dropped_unroutable = 0
    for agent_id, rows in frame.groupby("id", sort=True):
        agent_id = str(agent_id)
        types = rows["type"].unique()
        if len(types) != 1:
            raise TrajectoryFormatError(f"{source}: agent {agent_id}: vehicle type changes")
        times = rows["t"].to_numpy(dtype=np.float64)
        if np.any(np.diff(times) <= 0.0):
            raise TrajectoryFormatError(f"{source}: agent {agent_id}: timestamps not strictly increasing")

        first_step, positions = resample(times, rows[["x", "y"]].to_numpy(dtype=np.float64), dt)
        if positions.shape[0] < min_samples:
            dropped_short += 1
            _LOGGER.debug("Dropping agent %s: %d samples", agent_id, positions.shape[0])
            continue
        try:
            route = infer_route(positions, network, agent_id)
        except UnroutableAgentError as err:
            if keep_all:
                _LOGGER.debug("Keeping unroutable agent %s: %s", agent_id, err)
                route = ()
            else:
                dropped_unroutable += 1
                _LOGGER.warning("Dropping agent %s: %s", agent_id, err)
                continue
        agents.append(
            AgentRecord(
                id=agent_id,
                vehicle_type=str(types[0]),
                first_step=first_step,
                dt=dt,
                positions=positions,
                route=route,
            )
        )

    if dropped_short:
        _LOGGER.warning(
            "Dropped %d agents with fewer than %d samples at dt=%.2f", dropped_short, min_samples, dt
        )
    _LOGGER.info(
        "Loaded %d agents from %s (%d short, %d unroutable dropped)",
        len(agents),
        source,
        dropped_short,
        dropped_unroutable,
    )
    return TrajectoryDataset(dt=dt, agents=tuple(agents))


def load_trace(path: str | Path, network: RoadNetwork, dt: float = DEFAULT_DT) -> TrajectoryDataset:
    """Load a simulated trace, keeping every agent that has a grid sample."""
    return load_trajectories(path, network, dt, keep_all=True)


def save_trajectories(dataset: TrajectoryDataset, path: str | Path) -> None:
    """Write a dataset as id,type,t,x,y CSV.

    Args:
        dataset: Dataset to write
        path: Destination file
    """
    frames = [
        pd.DataFrame(
            {
                "id": agent.id,
                "type": agent.vehicle_type,
                "t": np.round(agent.times, 6),
                "x": agent.positions[:, 0],
                "y": agent.positions[:, 1],
            }
        )
        for agent in dataset.agents
    ]
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=list(CSV_COLUMNS))
    table.to_csv(path, index=False, columns=list(CSV_COLUMNS))
    _LOGGER.debug("Saved %d agents to %s", len(dataset.agents), path)


def load_demand(path: str | Path) -> list[DemandEntry]:
    """Load a JSON demand schedule.

    Args:
        path: JSON list of {spawn_time, route, type, speed?, id?}

    Returns:
        Entries sorted by spawn time

    Raises:
        TrajectoryFormatError: If an entry is malformed
    """
    source = str(path)
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise TrajectoryFormatError(f"{source}: cannot read demand: {err}") from err
    except json.JSONDecodeError as err:
        raise TrajectoryFormatError(f"{source}:{err.lineno}:{err.colno}: {err.msg}") from err
    if not isinstance(document, list):
        raise TrajectoryFormatError(f"{source}: demand must be a list")

    entries: list[DemandEntry] = []
    for i, raw in enumerate(document):
        where = f"{source}: [{i}]"
        try:
            vehicle_type = str(raw.get("type", "car"))
            _check_vehicle_type(vehicle_type, where)
            route = tuple(str(road_id) for road_id in raw["route"])
            if not route:
                raise TrajectoryFormatError(f"{where}.route: empty route")
            speed = raw.get("speed")
            entries.append(
                DemandEntry(
                    spawn_time=float(raw["spawn_time"]),
                    route=route,
                    vehicle_type=vehicle_type,
                    speed=None if speed is None else float(speed),
                    id=None if raw.get("id") is None else str(raw["id"]),
                )
            )
        except KeyError as err:
            raise TrajectoryFormatError(f"{where}: missing field {err.args[0]!r}") from err
        except (TypeError, ValueError, AttributeError) as err:
            raise TrajectoryFormatError(f"{where}: {err}") from err
    return sorted(entries, key=lambda entry: entry.spawn_time)


def save_demand(entries: Iterable[DemandEntry], path: str | Path) -> None:
    """Write a demand schedule as JSON."""
    Path(path).write_text(json.dumps([entry.to_dict() for entry in entries], indent=2) + "\n", encoding="utf-8")


def poisson_demand(
    routes: Sequence[Sequence[str]],
    rate: float | Sequence[float],
    horizon: float,
    rng_seed: int,
    type_weights: dict[str, float] | None = None,
) -> list[DemandEntry]:
    """Draw a spawn schedule with Poisson arrivals on every route.

    Args:
        routes: Candidate routes
        rate: Arrivals per second, one value or one per route
        horizon: Last spawn time (s)
        rng_seed: Seed of the arrival process
        type_weights: Relative frequency per vehicle type; all cars if None

    Returns:
        Entries sorted by spawn time
    """
    rates = [float(rate)] * len(routes) if isinstance(rate, (int, float)) else [float(r) for r in rate]
    if len(rates) != len(routes):
        raise ValueError("one rate per route required")
    weights = type_weights or {"car": 1.0}
    for vehicle_type in weights:
        _check_vehicle_type(vehicle_type, "type_weights")
    type_names = sorted(weights)
    probabilities = np.array([weights[name] for name in type_names], dtype=np.float64)
    probabilities /= probabilities.sum()

    rng = np.random.default_rng(rng_seed)
    entries: list[DemandEntry] = []
    for route, route_rate in zip(routes, rates):
        if route_rate <= 0.0:
            continue
        t = rng.exponential(1.0 / route_rate)
        while t <= horizon:
            entries.append(
                DemandEntry(
                    spawn_time=float(t),
                    route=tuple(route),
                    vehicle_type=str(rng.choice(type_names, p=probabilities)),
                )
            )
            t += rng.exponential(1.0 / route_rate)
    entries.sort(key=lambda entry: entry.spawn_time)
    _LOGGER.debug("Drew %d spawns over %.0f s on %d routes", len(entries), horizon, len(routes))
    return entries


@dataclass(eq=False)
class _Vehicle:
    """State of one generated vehicle."""

    id: str
    vehicle_type: str
    route: tuple[str, ...]
    path: RoutePath
    controller: IdmController
    length: float
    station: float
    speed: float
    first_step: int
    positions: list[np.ndarray] = field(default_factory=list)
    # (route index, stops) taken at the first red step seen on that road
    red_decision: tuple[int, bool] | None = None

    def road_index(self) -> int:
        """Index of the route road the vehicle is on."""
        index = int(np.searchsorted(self.path.road_ends, self.station, side="left"))
        return min(index, len(self.route) - 1)

    def road_station(self, index: int) -> float:
        """Station relative to the start of route road `index`."""
        return self.station - float(self.path.road_starts[index])


def _check_route(network: RoadNetwork, route: Sequence[str], where: str) -> None:
    for road_id in route:
        if not network.has_road(road_id):
            raise TrajectoryFormatError(f"{where}: spawn position not on network (unknown road {road_id!r})")
    for a, b in zip(route, route[1:]):
        if b not in network.road(a).successors:
            raise TrajectoryFormatError(f"{where}: route not connected at {a!r} -> {b!r}")


def _leader_gap(
    vehicle: _Vehicle,
    occupancy: dict[str, list[tuple[float, _Vehicle]]],
    network: RoadNetwork,
    t: float,
) -> tuple[float | None, float]:
    """Return (gap, leader speed) for a vehicle, including red-light stop lines.

    Whether the vehicle stops at a red light is decided once, at the first
    red step it spends on the road, from its speed and distance to the stop
    line at that moment. A vehicle that decided to stop keeps the stop line
    as a standing leader until the light turns green.
    """
    index = vehicle.road_index()
    road_id = vehicle.route[index]
    own = vehicle.road_station(index)
    gap: float | None = None
    leader_speed = 0.0

    for station, other in occupancy.get(road_id, []):
        if other is not vehicle and station > own:
            gap = station - own - other.length
            leader_speed = other.speed
            break

    to_road_end = float(vehicle.path.road_ends[index]) - vehicle.station
    if gap is None and index + 1 < len(vehicle.route):
        ahead = occupancy.get(vehicle.route[index + 1], [])
        if ahead:
            station, other = ahead[0]
            # Connector length between the two roads is part of the gap
            connector = float(vehicle.path.road_starts[index + 1] - vehicle.path.road_ends[index])
            gap = to_road_end + connector + station - other.length
            leader_speed = other.speed

    if road_light_state(network, road_id, t) is not LightState.RED:
        vehicle.red_decision = None
        return gap, leader_speed

    if vehicle.red_decision is None or vehicle.red_decision[0] != index:
        # Vehicles that can no longer stop with comfortable braking drive through
        stops = to_road_end >= 0.0 and vehicle.controller.params.stopping_distance(vehicle.speed) <= to_road_end
        vehicle.red_decision = (index, stops)
    if vehicle.red_decision[1]:
        stop_gap = max(0.0, to_road_end)
        if gap is None or stop_gap < gap:
            gap, leader_speed = stop_gap, 0.0
    return gap, leader_speed


def generate_synthetic_expert(
    network: RoadNetwork,
    demand: Sequence[DemandEntry],
    idm: dict[str, IdmParams] | None = None,
    horizon: float = 600.0,
    rng_seed: int = 0,
    dt: float = DEFAULT_DT,
    speed_jitter: float = 0.0,
) -> TrajectoryDataset:
    """Simulate IDM vehicles along their routes to produce ground truth.

    Every vehicle drives lane 0 of each route road. A vehicle enters at
    the first grid step not before its spawn time, waiting in a queue while
    the entry point is occupied, and leaves when it reaches the end of its
    route. Positions are recorded on the dt grid until the horizon.

    Args:
        network: Road network (signals are honored)
        demand: Spawn schedule
        idm: Parameters per vehicle type, baseline table if None
        horizon: Simulated time (s)
        rng_seed: Seed for the desired-speed jitter
        dt: Time step (s)
        speed_jitter: Relative std of a per-vehicle desired speed factor

    Returns:
        Dataset with planted routes

    Raises:
        TrajectoryFormatError: If a route references unknown or unconnected roads
        ValueError: If horizon is not positive
    """
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    params_by_type = idm or default_idm_params()
    rng = np.random.default_rng(rng_seed)

    schedule: list[tuple[int, DemandEntry, str]] = []
    for i, entry in enumerate(sorted(demand, key=lambda e: e.spawn_time)):
        where = f"demand[{i}]"
        _check_vehicle_type(entry.vehicle_type, where)
        _check_route(network, entry.route, where)
        spawn_step = math.ceil(entry.spawn_time / dt - _GRID_EPSILON)
        schedule.append((spawn_step, entry, entry.id or f"veh{i:05d}"))

    steps = math.floor(horizon / dt + _GRID_EPSILON)
    active: list[_Vehicle] = []
    finished: list[_Vehicle] = []
    waiting: list[tuple[int, DemandEntry, str]] = []
    next_entry = 0

    for step in range(steps + 1):
        t = step * dt

        # Phase 1: Spawn queued vehicles whose entry point is free
        while next_entry < len(schedule) and schedule[next_entry][0] <= step:
            waiting.append(schedule[next_entry])
            next_entry += 1
        occupancy = _occupancy(active)
        blocked_roads: set[str] = set()
        still_waiting: list[tuple[int, DemandEntry, str]] = []
        for item in waiting:
            _, entry, agent_id = item
            first_road_id = entry.route[0]
            base = params_by_type[entry.vehicle_type]
            length = VEHICLE_LENGTH[entry.vehicle_type]
            first_road = occupancy.get(first_road_id, [])
            if first_road_id in blocked_roads or (
                first_road and first_road[0][0] - first_road[0][1].length < length + base.min_gap
            ):
                # First come first served per entry road
                blocked_roads.add(first_road_id)
                still_waiting.append(item)
                continue
            params = base
            if speed_jitter > 0.0:
                factor = max(0.5, 1.0 + speed_jitter * rng.standard_normal())
                params = replace(base, desired_speed=base.desired_speed * factor)
            speed = params.desired_speed if entry.speed is None else min(entry.speed, params.desired_speed)
            if first_road:
                speed = min(speed, first_road[0][1].speed)
            active.append(
                _Vehicle(
                    id=agent_id,
                    vehicle_type=entry.vehicle_type,
                    route=entry.route,
                    path=network.route_path(entry.route, 0),
                    controller=IdmController(params),
                    length=length,
                    station=0.0,
                    speed=max(0.0, speed),
                    first_step=step,
                )
            )
            occupancy = _occupancy(active)
        waiting = still_waiting

        # Phase 2: Record positions
        for vehicle in active:
            vehicle.positions.append(vehicle.path.point_at(vehicle.station))

        if step == steps:
            break

        # Phase 3: IDM accelerations from the current state
        accelerations = []
        for vehicle in active:
            gap, leader_speed = _leader_gap(vehicle, occupancy, network, t)
            accelerations.append((vehicle.controller.acceleration(vehicle.speed, gap, leader_speed), gap))

        # Phase 4: Advance and remove vehicles past their route end
        still_active: list[_Vehicle] = []
        for vehicle, (accel, gap) in zip(active, accelerations):
            distance, speed = vehicle.controller.advance(vehicle.speed, accel, dt)
            if gap is not None and distance > max(0.0, gap):
                distance = max(0.0, gap)
                speed = min(speed, distance / dt)
            vehicle.station += distance
            vehicle.speed = speed
            if vehicle.station >= vehicle.path.length:
                finished.append(vehicle)
            else:
                still_active.append(vehicle)
        active = still_active

    finished.extend(active)
    never_spawned = len(waiting) + len(schedule) - next_entry
    if never_spawned:
        _LOGGER.info("%d vehicles did not enter before the horizon", never_spawned)

    agents = tuple(
        sorted(
            (
                AgentRecord(
                    id=vehicle.id,
                    vehicle_type=vehicle.vehicle_type,
                    first_step=vehicle.first_step,
                    dt=dt,
                    positions=np.asarray(vehicle.positions),
                    route=vehicle.route,
                )
                for vehicle in finished
                if vehicle.positions
            ),
            key=lambda agent: agent.id,
        )
    )
    _LOGGER.info("Generated %d agents over %.0f s", len(agents), horizon)
    return TrajectoryDataset(dt=dt, agents=agents)


def _occupancy(vehicles: Iterable[_Vehicle]) -> dict[str, list[tuple[float, _Vehicle]]]:
    """Group vehicles by current road, sorted by station along the road."""
    occupancy: dict[str, list[tuple[float, _Vehicle]]] = {}
    for vehicle in vehicles:
        index = vehicle.road_index()
        occupancy.setdefault(vehicle.route[index], []).append((vehicle.road_station(index), vehicle))
    for entries in occupancy.values():
        entries.sort(key=lambda item: (item[0], item[1].id))
    return occupancy


def _crossing_events(agent: AgentRecord, network: RoadNetwork, road_id: str) -> tuple[list[float], list[float]]:
    """Return (stop times, start times) of an agent near the exit of a road.

    Speeds are finite differences assigned to the midpoint of each step;
    event times are interpolated where the speed crosses the threshold.
    """
    if agent.positions.shape[0] < 3 or road_id not in agent.route:
        return [], []
    road = network.road(road_id)
    speeds = np.linalg.norm(np.diff(agent.positions, axis=0), axis=1) / agent.dt
    mid_times = agent.times[:-1] + agent.dt / 2.0
    slow = speeds < STOP_SPEED_THRESHOLD

    stops: list[float] = []
    starts: list[float] = []
    for k in np.flatnonzero(slow[1:] != slow[:-1]):
        position = agent.positions[k + 1]
        projected = network.project_on_roads(position, [road_id])
        if projected is None or projected.distance_moved > DEFAULT_OFFROAD_THRESHOLD:
            continue
        remaining = road.lanes[projected.lane_index].length - projected.station
        if remaining > STOP_LINE_RADIUS:
            continue
        v0, v1 = speeds[k], speeds[k + 1]
        fraction = (STOP_SPEED_THRESHOLD - v0) / (v1 - v0)
        event = float(mid_times[k] + fraction * agent.dt)
        (stops if slow[k + 1] else starts).append(event)
    return stops, starts


def phase_onsets(events: Iterable[float], min_gap: float = ONSET_MIN_GAP) -> np.ndarray:
    """Return events whose gap to the previous event exceeds min_gap.

    The first event always counts as an onset.
    """
    ordered = np.sort(np.asarray(list(events), dtype=np.float64))
    if ordered.size == 0:
        return ordered
    keep = np.concatenate(([True], np.diff(ordered) > min_gap))
    return ordered[keep]


def onset_cost(
    onsets: np.ndarray,
    offsets: np.ndarray,
    cycle: float,
    tolerance: float = ONSET_MATCH_TOLERANCE,
) -> tuple[np.ndarray, np.ndarray]:
    """Score candidate periodic schedules against observed onsets.

    Each observed onset within tolerance of a predicted onset costs -1;
    each predicted onset inside the observation window without an
    observed onset within tolerance costs +1.

    Args:
        onsets: Observed onset times, sorted
        offsets: Candidate phase offsets in [0, cycle)
        cycle: Cycle length (s)
        tolerance: Match window (s)

    Returns:
        Tuple of (cost per offset, sum of squared matched residuals per offset)
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    residuals = np.mod(onsets[None, :] - offsets[:, None] + cycle / 2.0, cycle) - cycle / 2.0
    matched = np.abs(residuals) <= tolerance
    cost = -matched.sum(axis=1).astype(np.float64)
    squared = np.where(matched, residuals**2, 0.0).sum(axis=1)

    low, high = onsets[0] - tolerance, onsets[-1] + tolerance
    first_n = np.ceil((low - offsets) / cycle)
    count = int(np.ceil((high - low) / cycle)) + 1
    predicted = offsets[:, None] + (first_n[:, None] + np.arange(count)[None, :]) * cycle
    inside = predicted <= high
    index = np.searchsorted(onsets, predicted)
    right = onsets[np.clip(index, 0, onsets.size - 1)]
    left = onsets[np.clip(index - 1, 0, onsets.size - 1)]
    nearest = np.minimum(np.abs(right - predicted), np.abs(left - predicted))
    unmatched = inside & (nearest > tolerance)
    cost += unmatched.sum(axis=1)
    return cost, squared


def _best_offset(onsets: np.ndarray, offsets: np.ndarray, cycle: float) -> tuple[float, float, float]:
    """Return (offset, cost, squared residuals) of the minimal-cost offset."""
    cost, squared = onset_cost(onsets, offsets, cycle)
    best = int(np.lexsort((offsets, squared, cost))[0])
    return float(offsets[best]), float(cost[best]), float(squared[best])


def estimate_schedule(
    road_id: str,
    green_events: Sequence[float],
    red_events: Sequence[float],
) -> LightEstimate:
    """Estimate a fixed-time schedule from start (green) and stop (red) events.

    Args:
        road_id: Signaled road
        green_events: Times vehicles started moving near the stop line
        red_events: Times vehicles stopped near the stop line

    Returns:
        The estimate; schedule is None with fewer than MIN_ONSET_EVENTS green onsets
    """
    onsets = phase_onsets(green_events)
    if onsets.size < MIN_ONSET_EVENTS:
        _LOGGER.warning("Signal on road %s unestimated: %d green onsets", road_id, onsets.size)
        return LightEstimate(road_id=road_id, schedule=None, cost=0.0, onset_count=int(onsets.size))

    candidates = []
    for cycle in SIGNAL_CYCLES:
        offsets = np.round(np.arange(0.0, cycle, OFFSET_RESOLUTION), 2)
        offset, cost, squared = _best_offset(onsets, offsets, cycle)
        candidates.append((cost, squared, cycle, offset))
    cost, _, cycle, first_green = min(candidates)

    red_onsets = phase_onsets(red_events)
    if red_onsets.size >= MIN_ONSET_EVENTS:
        # Red onsets relative to green onsets give the green duration
        durations = np.round(np.arange(OFFSET_RESOLUTION, cycle, OFFSET_RESOLUTION), 2)
        red_offset, _, _ = _best_offset(red_onsets, np.mod(first_green + durations, cycle), cycle)
        green_time = float(np.mod(red_offset - first_green, cycle))
    else:
        green_time = cycle / 2.0
    green_time = float(np.clip(green_time, OFFSET_RESOLUTION, cycle - OFFSET_RESOLUTION))

    schedule = SignalSchedule(road_id=road_id, first_green=first_green, green_time=green_time, cycle=cycle)
    _LOGGER.info(
        "Signal on road %s: cycle %.0f s, first green %.2f s, green %.2f s (cost %.0f, %d onsets)",
        road_id,
        cycle,
        first_green,
        green_time,
        cost,
        onsets.size,
    )
    return LightEstimate(road_id=road_id, schedule=schedule, cost=cost, onset_count=int(onsets.size))


def estimate_traffic_lights(
    dataset: TrajectoryDataset,
    network: RoadNetwork,
    signaled_roads: Sequence[str],
    workers: int = 1,
) -> list[LightEstimate]:
    """Estimate fixed-time schedules for signaled roads from trajectories.

    Args:
        dataset: Recorded trajectories with routes
        network: Road network
        signaled_roads: Roads whose exit is signal controlled
        workers: Roads estimated concurrently

    Returns:
        One estimate per road, in the given order

    Raises:
        UnknownRoadError: If a road does not exist
    """
    for road_id in signaled_roads:
        if not network.has_road(road_id):
            raise UnknownRoadError(f"unknown road id: {road_id!r}")

    def estimate(road_id: str) -> LightEstimate:
        stops: list[float] = []
        starts: list[float] = []
        for agent in dataset.agents:
            agent_stops, agent_starts = _crossing_events(agent, network, road_id)
            stops.extend(agent_stops)
            starts.extend(agent_starts)
        _LOGGER.debug("Road %s: %d stop events, %d start events", road_id, len(stops), len(starts))
        return estimate_schedule(road_id, starts, stops)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(estimate, signaled_roads))
    return [estimate(road_id) for road_id in signaled_roads]


def apply_estimates(network: RoadNetwork, estimates: Iterable[LightEstimate]) -> RoadNetwork:
    """Return a network whose signals are replaced by the estimated schedules."""
    estimated = {e.road_id: e.schedule for e in estimates if e.schedule is not None}
    signals = [s for s in network.signals if s.road_id not in estimated]
    signals.extend(estimated.values())
    return RoadNetwork(roads=network.roads, signals=tuple(sorted(signals, key=lambda s: s.road_id)))


def dataset_from_arrays(
    tracks: dict[str, tuple[str, int, np.ndarray, tuple[str, ...]]],
    dt: float,
) -> TrajectoryDataset:
    """Build a dataset from {id: (type, first_step, positions, route)}."""
    agents = []
    for agent_id in sorted(tracks):
        vehicle_type, first_step, positions, route = tracks[agent_id]
        _check_vehicle_type(vehicle_type, f"agent {agent_id}")
        agents.append(
            AgentRecord(
                id=agent_id,
                vehicle_type=vehicle_type,
                first_step=first_step,
                dt=dt,
                positions=np.asarray(positions, dtype=np.float64),
                route=tuple(route),
            )
        )
    return TrajectoryDataset(dt=dt, agents=tuple(agents))


def describe(dataset: TrajectoryDataset) -> dict[str, Any]:
    """Return summary counts of a dataset for logging."""
    counts = {vehicle_type: 0 for vehicle_type in VEHICLE_TYPES}
    for agent in dataset.agents:
        counts[agent.vehicle_type] += 1
    return {
        "agents": len(dataset.agents),
        "first_time": dataset.first_step * dataset.dt,
        "last_time": dataset.last_step * dataset.dt,
        "types": counts,
    }
