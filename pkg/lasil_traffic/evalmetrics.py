"""Realism metrics, distributions, runtime profiling and report output.

Microscopic metrics pair agents by id:
- Position and velocity RMSE per step, averaged over steps
- minADE over several stochastic rollouts
- Off-road rate

Macroscopic metrics pair roads: per-road density (vehicles per lane km)
and mean speed. Speed RMSE only counts (road, step) cells where both traces
have a vehicle with a known speed; the fraction of such cells is reported as
coverage.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.collections import LineCollection
from matplotlib.figure import Figure

from .const import (
    DEFAULT_OFFROAD_THRESHOLD,
    DOMAIN,
    LEADER_BIN_WIDTH,
    LEADER_DISTANCE_CAP,
    PROFILE_STEPS,
    SPEED_BIN_WIDTH,
)
from .exceptions import DataError
from .policy import PolicyModel
from .roadnet import ProjectedPoint, RoadNetwork, is_offroad, road_density
from .simengine import SimAgent, SimSettings, WorldState, sim_step
from .trajdata import AgentRecord, TrajectoryDataset
from .types import EvalReportDict, HistogramDict

_LOGGER = logging.getLogger(__name__)

REPORT_METRICS = (
    "position_rmse",
    "velocity_rmse",
    "min_ade",
    "offroad_rate",
    "road_density_rmse",
    "road_speed_rmse",
)

# Keep SVG output byte-stable across runs
_SVG_METADATA = {"Date": None, "Creator": None}


def _by_step(trace: TrajectoryDataset) -> dict[int, dict[str, np.ndarray]]:
    steps: dict[int, dict[str, np.ndarray]] = {}
    for agent in trace.agents:
        for offset, position in enumerate(agent.positions):
            steps.setdefault(agent.first_step + offset, {})[agent.id] = position
    return steps


def _velocities_by_step(trace: TrajectoryDataset) -> dict[int, dict[str, np.ndarray]]:
    steps: dict[int, dict[str, np.ndarray]] = {}
    for agent in trace.agents:
        velocity = np.diff(agent.positions, axis=0) / trace.dt
        for offset, value in enumerate(velocity, start=1):
            steps.setdefault(agent.first_step + offset, {})[agent.id] = value
    return steps


def _step_window(steps: Iterable[int], start: int | None, horizon: int | None) -> list[int]:
    ordered = sorted(steps)
    if start is not None:
        ordered = [step for step in ordered if step >= start]
    if horizon is not None and ordered:
        first = ordered[0] if start is None else start
        ordered = [step for step in ordered if step < first + horizon]
    return ordered


def rmse(
    real: TrajectoryDataset,
    sim: TrajectoryDataset,
    horizon: int | None = None,
    start_step: int | None = None,
    quantity: str = "position",
) -> float:
    """Per-step root mean squared error averaged over steps.

    Agents are matched by id; at each step only agents present in both traces
    count, and steps without a match are skipped.

    Args:
        real: Recorded trace
        sim: Simulated trace
        horizon: Number of steps to evaluate, None for all
        start_step: First step, None for the first matched step
        quantity: "position" (m) or "velocity" (m/s, finite differences)

    Returns:
        The error

    Raises:
        DataError: If no agent is matched at any step
    """
    if quantity == "position":
        real_steps, sim_steps = _by_step(real), _by_step(sim)
    elif quantity == "velocity":
        real_steps, sim_steps = _velocities_by_step(real), _velocities_by_step(sim)
    else:
        raise ValueError(f"unknown quantity {quantity!r}")

    per_step = []
    for step in _step_window(set(real_steps) & set(sim_steps), start_step, horizon):
        ids = sorted(set(real_steps[step]) & set(sim_steps[step]))
        if not ids:
            continue
        errors = np.array([real_steps[step][i] - sim_steps[step][i] for i in ids])
        per_step.append(np.sqrt(np.mean(np.sum(errors * errors, axis=1))))
    if not per_step:
        raise DataError(f"no matched agents for {quantity} RMSE")
    return float(np.mean(per_step))


def min_ade(
    real: TrajectoryDataset,
    rollouts: Sequence[TrajectoryDataset],
    squared: bool = False,
    horizon: int | None = None,
    start_step: int | None = None,
) -> float:
    """Minimum over rollouts of the mean displacement, averaged over agents.

    Args:
        real: Recorded trace
        rollouts: Simulated traces of the same episode
        squared: Use the squared displacement instead of its norm
        horizon: Number of steps to evaluate, None for all
        start_step: First step, None for each pair's first matched step

    Returns:
        The error (m, or m² when squared)

    Raises:
        DataError: If no rollouts are given or nothing matches
    """
    if not rollouts:
        raise DataError("minADE needs at least one rollout")
    real_steps = _by_step(real)
    best: dict[str, float] = {}
    for rollout in rollouts:
        sim_steps = _by_step(rollout)
        displacements: dict[str, list[float]] = {}
        for step in _step_window(set(real_steps) & set(sim_steps), start_step, horizon):
            for agent_id in set(real_steps[step]) & set(sim_steps[step]):
                diff = real_steps[step][agent_id] - sim_steps[step][agent_id]
                value = float(diff @ diff) if squared else float(np.hypot(*diff))
                displacements.setdefault(agent_id, []).append(value)
        for agent_id, values in displacements.items():
            ade = float(np.mean(values))
            best[agent_id] = min(best.get(agent_id, np.inf), ade)
    if not best:
        raise DataError("no matched agents for minADE")
    return float(np.mean([best[agent_id] for agent_id in sorted(best)]))


def offroad_rate(
    trace: TrajectoryDataset,
    network: RoadNetwork,
    threshold: float = DEFAULT_OFFROAD_THRESHOLD,
) -> float:
    """Mean over steps of the fraction of vehicles farther than threshold from the road."""
    fractions = []
    for step, positions in sorted(_by_step(trace).items()):
        if not positions:
            continue
        off = sum(1 for p in positions.values() if is_offroad(network.project(p).distance_moved, threshold))
        fractions.append(off / len(positions))
    return float(np.mean(fractions)) if fractions else 0.0


@dataclass(frozen=True)
class _Observation:
    agent_id: str
    projected: ProjectedPoint
    speed: float | None


def _observations(trace: TrajectoryDataset, network: RoadNetwork) -> dict[int, list[_Observation]]:
    steps: dict[int, list[_Observation]] = {}
    for agent in trace.agents:
        speeds = np.linalg.norm(np.diff(agent.positions, axis=0), axis=1) / trace.dt
        for offset, position in enumerate(agent.positions):
            speed = float(speeds[offset - 1]) if offset > 0 else None
            steps.setdefault(agent.first_step + offset, []).append(
                _Observation(agent.id, network.project(position), speed)
            )
    return steps


def road_states(
    trace: TrajectoryDataset,
    network: RoadNetwork,
) -> dict[int, dict[str, tuple[float, float | None]]]:
    """Per step and road: (density veh/km, mean speed or None)."""
    states: dict[int, dict[str, tuple[float, float | None]]] = {}
    for step, observations in _observations(trace, network).items():
        projected = [obs.projected for obs in observations]
        row: dict[str, tuple[float, float | None]] = {}
        for road in network.roads:
            speeds = [obs.speed for obs in observations if obs.projected.road_id == road.id and obs.speed is not None]
            row[road.id] = (road_density(network, road.id, projected), float(np.mean(speeds)) if speeds else None)
        states[step] = row
    return states


@dataclass(frozen=True)
class MacroscopicErrors:
    """Road-level errors.

    Attributes:
        density_rmse: Density RMSE over all roads (veh/km)
        speed_rmse: Speed RMSE over jointly occupied cells (m/s), None if there are none
        speed_coverage: Jointly occupied cells over cells occupied in either trace
    """

    density_rmse: float
    speed_rmse: float | None
    speed_coverage: float


def macroscopic_rmse(
    real: TrajectoryDataset,
    sim: TrajectoryDataset,
    network: RoadNetwork,
    horizon: int | None = None,
    start_step: int | None = None,
) -> MacroscopicErrors:
    """Road density and road speed RMSE with roads as the population."""
    real_states, sim_states = road_states(real, network), road_states(sim, network)
    empty = {road.id: (0.0, None) for road in network.roads}
    steps = _step_window(set(real_states) | set(sim_states), start_step, horizon)

    density_errors = []
    speed_errors = []
    joint = either = 0
    for step in steps:
        real_row = real_states.get(step, empty)
        sim_row = sim_states.get(step, empty)
        densities = np.array([real_row[road.id][0] - sim_row[road.id][0] for road in network.roads])
        density_errors.append(np.sqrt(np.mean(densities**2)))
        cells = []
        for road in network.roads:
            real_speed, sim_speed = real_row[road.id][1], sim_row[road.id][1]
            if real_speed is not None or sim_speed is not None:
                either += 1
            if real_speed is not None and sim_speed is not None:
                cells.append(real_speed - sim_speed)
        joint += len(cells)
        if cells:
            speed_errors.append(np.sqrt(np.mean(np.square(cells))))

    return MacroscopicErrors(
        density_rmse=float(np.mean(density_errors)) if density_errors else 0.0,
        speed_rmse=float(np.mean(speed_errors)) if speed_errors else None,
        speed_coverage=joint / either if either else 1.0,
    )


@dataclass(frozen=True)
class Histogram:
    """Counts of values in fixed-width bins starting at 0.

    Attributes:
        bin_width: Bin width
        counts: Count per bin; bin k covers [k * width, (k + 1) * width)
    """

    bin_width: float
    counts: tuple[int, ...]

    @classmethod
    def of(cls, values: Iterable[float], bin_width: float) -> Histogram:
        """Histogram of non-negative values."""
        data = np.asarray(list(values), dtype=np.float64)
        if data.size == 0:
            return cls(bin_width=bin_width, counts=())
        bins = np.floor(data / bin_width).astype(np.int64)
        return cls(bin_width=bin_width, counts=tuple(int(c) for c in np.bincount(bins)))

    def to_dict(self) -> HistogramDict:
        """JSON shape of the histogram."""
        return {"bin_width": float(self.bin_width), "counts": list(self.counts)}

    @property
    def total(self) -> int:
        """Number of values."""
        return int(sum(self.counts))

    def to_frame(self) -> pd.DataFrame:
        """Bins as a data frame with bin_start, bin_end, count."""
        starts = np.arange(len(self.counts)) * self.bin_width
        return pd.DataFrame({"bin_start": starts, "bin_end": starts + self.bin_width, "count": list(self.counts)})


def leader_gaps(observations: Sequence[_Observation], cap: float = LEADER_DISTANCE_CAP) -> list[float]:
    """Arc-length distance to the nearest vehicle ahead on the same road and lane.

    Vehicles without a leader, or with one farther than cap, give no value.
    """
    lanes: dict[tuple[str, int], list[float]] = {}
    for obs in observations:
        lanes.setdefault((obs.projected.road_id, obs.projected.lane_index), []).append(obs.projected.station)
    gaps = []
    for stations in lanes.values():
        ordered = np.sort(np.asarray(stations))
        for gap in np.diff(ordered):
            if gap <= cap:
                gaps.append(float(gap))
    return gaps


@dataclass(frozen=True)
class Distributions:
    """Speed and leader distance distributions of a trace."""

    speed: Histogram
    leader_distance: Histogram


def distributions(trace: TrajectoryDataset, network: RoadNetwork) -> Distributions:
    """Histogram speeds (0.5 m/s bins) and leader distances (1 m bins up to 100 m)."""
    speeds: list[float] = []
    gaps: list[float] = []
    for _, observations in sorted(_observations(trace, network).items()):
        speeds.extend(obs.speed for obs in observations if obs.speed is not None)
        gaps.extend(leader_gaps(observations))
    return Distributions(
        speed=Histogram.of(speeds, SPEED_BIN_WIDTH),
        leader_distance=Histogram.of(gaps, LEADER_BIN_WIDTH),
    )


@dataclass(frozen=True)
class EvalReport:
    """All metrics of one evaluation.

    Attributes:
        position_rmse: m
        velocity_rmse: m/s, None if no agent has two matched steps
        min_ade: m
        offroad_rate: Fraction in [0, 1]
        road_density_rmse: veh/km
        road_speed_rmse: m/s, None without jointly occupied cells
        road_speed_coverage: Fraction of occupied cells used for the speed RMSE
        distributions: Speed and leader distance histograms of the simulated trace
    """

    position_rmse: float
    velocity_rmse: float | None
    min_ade: float
    offroad_rate: float
    road_density_rmse: float
    road_speed_rmse: float | None
    road_speed_coverage: float
    distributions: Distributions

    def to_dict(self) -> EvalReportDict:
        """JSON shape of the report."""
        return {
            "position_rmse": self.position_rmse,
            "velocity_rmse": self.velocity_rmse,
            "min_ade": self.min_ade,
            "offroad_rate": self.offroad_rate,
            "road_density_rmse": self.road_density_rmse,
            "road_speed_rmse": self.road_speed_rmse,
            "road_speed_coverage": self.road_speed_coverage,
            "speed_histogram": self.distributions.speed.to_dict(),
            "leader_distance_histogram": self.distributions.leader_distance.to_dict(),
        }


def evaluate(
    real: TrajectoryDataset,
    sim: TrajectoryDataset,
    network: RoadNetwork,
    rollouts: Sequence[TrajectoryDataset] = (),
    horizon: int | None = None,
    start_step: int | None = None,
    threshold: float = DEFAULT_OFFROAD_THRESHOLD,
    squared_ade: bool = False,
) -> EvalReport:
    """Compute every metric of a simulated trace against the recording.

    Args:
        real: Recorded trace
        sim: Simulated trace
        network: Road network
        rollouts: Extra rollouts for minADE (the main trace is included)
        horizon: Number of steps to evaluate
        start_step: First evaluated step
        threshold: Off-road distance (m)
        squared_ade: Square displacements inside minADE

    Returns:
        The report
    """
    macro = macroscopic_rmse(real, sim, network, horizon, start_step)
    window = _step_window(_by_step(sim), start_step, horizon)
    clipped = _clip(sim, window[0], window[-1]) if window else sim
    try:
        velocity: float | None = rmse(real, sim, horizon, start_step, quantity="velocity")
    except DataError:
        velocity = None
    return EvalReport(
        position_rmse=rmse(real, sim, horizon, start_step),
        velocity_rmse=velocity,
        min_ade=min_ade(real, [sim, *rollouts], squared_ade, horizon, start_step),
        offroad_rate=offroad_rate(clipped, network, threshold),
        road_density_rmse=macro.density_rmse,
        road_speed_rmse=macro.speed_rmse,
        road_speed_coverage=macro.speed_coverage,
        distributions=distributions(clipped, network),
    )


def _clip(trace: TrajectoryDataset, first: int, last: int) -> TrajectoryDataset:
    agents = []
    for agent in trace.agents:
        lo, hi = max(first, agent.first_step), min(last, agent.last_step)
        if lo > hi:
            continue
        positions = agent.positions[lo - agent.first_step : hi - agent.first_step + 1]
        agents.append(AgentRecord(agent.id, agent.vehicle_type, lo, agent.dt, positions, agent.route))
    return TrajectoryDataset(dt=trace.dt, agents=tuple(agents))


def summarize_runs(reports: Sequence[EvalReport]) -> dict[str, dict[str, float | None]]:
    """Mean and population standard deviation of each metric over runs."""
    summary: dict[str, dict[str, float | None]] = {}
    for name in REPORT_METRICS:
        values = [getattr(report, name) for report in reports if getattr(report, name) is not None]
        summary[name] = {
            "mean": float(np.mean(values)) if values else None,
            "std": float(np.std(values)) if values else None,
        }
    return summary


def write_report(report: EvalReport, path: str | Path) -> None:
    """Write a report as sorted JSON."""
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_histograms(dist: Distributions, directory: str | Path) -> None:
    """Write speed_histogram.csv and leader_histogram.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dist.speed.to_frame().to_csv(directory / "speed_histogram.csv", index=False)
    dist.leader_distance.to_frame().to_csv(directory / "leader_histogram.csv", index=False)


def road_means(trace: TrajectoryDataset, network: RoadNetwork) -> pd.DataFrame:
    """Per-road mean density and mean speed over all steps of a trace."""
    states = road_states(trace, network)
    rows = []
    for road in network.roads:
        densities = [row[road.id][0] for row in states.values()]
        speeds = [row[road.id][1] for row in states.values() if row[road.id][1] is not None]
        rows.append(
            {
                "road": road.id,
                "density": float(np.mean(densities)) if densities else 0.0,
                "speed": float(np.mean(speeds)) if speeds else float("nan"),
            }
        )
    return pd.DataFrame(rows, columns=["road", "density", "speed"])


def plot_road_values(
    network: RoadNetwork,
    values: dict[str, float],
    path: str | Path,
    label: str,
    vmin: float | None = None,
    vmax: float | None = None,
    cmap: str = "viridis",
) -> None:
    """Render one value per road as colored lane centerlines in an SVG file.

    Roads without a finite value are drawn in light grey.
    """
    figure = Figure(figsize=(6, 6))
    axes = figure.add_subplot(111, aspect="equal")
    segments, colors, missing = [], [], []
    for road in network.roads:
        value = values.get(road.id)
        for lane in road.lanes:
            if value is None or not np.isfinite(value):
                missing.append(lane.centerline)
            else:
                segments.append(lane.centerline)
                colors.append(value)
    if missing:
        axes.add_collection(LineCollection(missing, colors="0.85", linewidths=2.0))
    if segments:
        finite = np.asarray(colors)
        lines = LineCollection(
            segments,
            array=finite,
            cmap=cmap,
            linewidths=3.0,
        )
        lines.set_clim(
            float(finite.min()) if vmin is None else vmin,
            float(finite.max()) if vmax is None else vmax,
        )
        axes.add_collection(lines)
        figure.colorbar(lines, ax=axes).set_label(label)
    axes.autoscale()
    axes.set_xlabel("x (m)")
    axes.set_ylabel("y (m)")
    with matplotlib.rc_context({"svg.hashsalt": DOMAIN}):
        figure.savefig(Path(path), format="svg", metadata=_SVG_METADATA)


def write_heatmaps(trace: TrajectoryDataset, network: RoadNetwork, directory: str | Path) -> pd.DataFrame:
    """Write density.svg and speed.svg heatmaps plus road_means.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    means = road_means(trace, network)
    means.to_csv(directory / "road_means.csv", index=False)
    density = dict(zip(means["road"], means["density"]))
    speed = dict(zip(means["road"], means["speed"]))
    plot_road_values(network, density, directory / "density.svg", "density (veh/km)", vmin=0.0)
    plot_road_values(network, speed, directory / "speed.svg", "speed (m/s)", vmin=0.0, cmap="inferno")
    return means


@dataclass(frozen=True)
class RuntimeProfile:
    """Per-step wall time by world size.

    Attributes:
        sizes: Number of agents per world
        medians: Median step time per size (s)
        r_squared: Coefficient of determination of a linear fit
    """

    sizes: tuple[int, ...]
    medians: tuple[float, ...]
    r_squared: float | None

    def to_frame(self) -> pd.DataFrame:
        """Rows of agents and median seconds."""
        return pd.DataFrame({"agents": list(self.sizes), "median_step_seconds": list(self.medians)})


def synthetic_world(network: RoadNetwork, count: int, seed: int) -> WorldState:
    """Place `count` agents at random stations on random lanes.

    Each agent drives its road and follows the first successor chain, has
    moved 4 m in the last step and never times out.
    """
    rng = np.random.default_rng(seed)
    roads = network.roads
    agents = []
    for index in range(count):
        road = roads[int(rng.integers(len(roads)))]
        route = [road.id]
        while len(route) < 4 and network.road(route[-1]).successors:
            successor = network.road(route[-1]).successors[0]
            if successor in route:
                break
            route.append(successor)
        lane_index = int(rng.integers(len(road.lanes)))
        lane = road.lanes[lane_index]
        station = float(rng.uniform(4.0, max(lane.length, 4.0)))
        current, _ = lane.point_at(station)
        previous, _ = lane.point_at(station - 4.0)
        path = network.route_path(tuple(route), lane_index)
        agents.append(
            SimAgent(
                id=f"p{index:05d}",
                vehicle_type="car",
                history=np.vstack((previous, current)),
                route=tuple(route),
                route_index=0,
                destination=np.array(path.vertices[-1]),
                last_time=float("inf"),
            )
        )
    return WorldState(t=0.0, step=0, seed=seed, agents=tuple(agents))


def profile_runtime(
    policy: PolicyModel,
    network: RoadNetwork,
    sizes: Sequence[int],
    settings: SimSettings | None = None,
    steps: int = PROFILE_STEPS,
    seed: int = 0,
) -> RuntimeProfile:
    """Time simulation steps at several world sizes.

    Args:
        policy: Driving policy
        network: Road network
        sizes: Agent counts
        settings: Pipeline settings
        steps: Timed steps per size
        seed: Placement and sampling seed

    Returns:
        Median step times and the linear-fit R²
    """
    settings = settings or SimSettings()
    medians = []
    for size in sizes:
        world = synthetic_world(network, size, seed)
        samples = []
        for _ in range(steps):
            started = time.perf_counter()
            world = sim_step(world, policy, network, settings)
            samples.append(time.perf_counter() - started)
        medians.append(statistics.median(samples))
        _LOGGER.info("Profiled %d agents: median step %.4f s", size, medians[-1])

    r_squared = None
    if len(sizes) >= 2 and len(set(sizes)) >= 2:
        x = np.asarray(sizes, dtype=np.float64)
        y = np.asarray(medians)
        slope, intercept = np.polyfit(x, y, 1)
        residual = np.sum((y - (slope * x + intercept)) ** 2)
        total = np.sum((y - y.mean()) ** 2)
        r_squared = float(1.0 - residual / total) if total > 0 else 1.0
    return RuntimeProfile(sizes=tuple(int(s) for s in sizes), medians=tuple(medians), r_squared=r_squared)


def road_deltas(before: pd.DataFrame, after: pd.DataFrame) -> pd.DataFrame:
    """Per-road change of mean density and mean speed between two runs.

    Both frames come from road_means on networks with the same road ids.
    A speed delta is NaN where either run never had a moving vehicle.
    """
    merged = before.merge(after, on="road", how="outer", suffixes=("_before", "_after")).sort_values("road")
    merged["density_delta"] = merged["density_after"].fillna(0.0) - merged["density_before"].fillna(0.0)
    merged["speed_delta"] = merged["speed_after"] - merged["speed_before"]
    return merged.reset_index(drop=True)


def write_change_map(network: RoadNetwork, deltas: pd.DataFrame, directory: str | Path) -> None:
    """Write road_deltas.csv and the density and speed change maps.

    The color scale is symmetric around zero.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    deltas.to_csv(directory / "road_deltas.csv", index=False, float_format="%.10g")
    for column, label in (("density_delta", "density change (veh/km)"), ("speed_delta", "speed change (m/s)")):
        values = dict(zip(deltas["road"], deltas[column]))
        finite = [abs(v) for v in values.values() if np.isfinite(v)]
        bound = max(max(finite, default=0.0), 1e-9)
        plot_road_values(
            network,
            values,
            directory / f"{column}.svg",
            label,
            vmin=-bound,
            vmax=bound,
            cmap="coolwarm",
        )
