"""Road network geometry for the LASIL traffic simulator.

Provides the geometric substrate used by every other module:
- Loading and saving the native JSON network format
- Projection of arbitrary points onto the drivable lane area
- Fixed-time signal state lookup
- Road-level aggregation (density per lane kilometer)
- Route waypoint sampling for context features
- Road geometry edits for what-if experiments

A lane is a polyline with a piecewise-constant width per segment. The
drivable area of a segment is the rectangle spanned by the segment and
half its width on either side; projection clamps the station along the
segment and the lateral offset independently, which is the exact nearest
point of that rectangle.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .const import (
    DEFAULT_OFFROAD_THRESHOLD,
    DEFAULT_ROUTE_POINT_INTERVAL,
    DEFAULT_ROUTE_POINTS,
    GRID_CELL_SIZE,
    NETWORK_FORMAT_VERSION,
    SIGNAL_CYCLES,
)
from .exceptions import NetworkFormatError, UnknownRoadError
from .types import LaneDict, NetworkDocument, RoadDict, SignalDict

_LOGGER = logging.getLogger(__name__)

# Searching rings farther than this outside the grid extent falls back to
# a brute-force scan over all segments
_MAX_OUTSIDE_RINGS = 2


class LightState(str, Enum):
    """Signal status as seen by a vehicle on a road."""

    GREEN = "green"
    RED = "red"
    NONE = "none"


@dataclass(frozen=True, eq=False)
class Lane:
    """A lane centerline with piecewise-constant width.

    Attributes:
        centerline: Polyline vertices, shape (n, 2), meters
        width: Width of each segment, shape (n - 1,), meters
    """

    centerline: np.ndarray
    width: np.ndarray

    def __post_init__(self) -> None:
        """Normalize arrays and check lane invariants."""
        points = np.asarray(self.centerline, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ValueError("centerline must be a list of [x, y] points")
        if points.shape[0] < 2:
            raise ValueError("lane needs at least 2 centerline vertices")
        if not np.all(np.isfinite(points)):
            raise ValueError("centerline contains non-finite coordinates")

        widths = np.atleast_1d(np.asarray(self.width, dtype=np.float64))
        segments = points.shape[0] - 1
        if widths.shape == (1,):
            widths = np.full(segments, widths[0])
        elif widths.shape == (segments + 1,):
            # One value per vertex; the last vertex closes no segment
            widths = widths[:-1].copy()
        elif widths.shape != (segments,):
            raise ValueError(
                f"width has {widths.size} values for {points.shape[0]} vertices"
            )
        if not np.all(np.isfinite(widths)) or np.any(widths <= 0.0):
            raise ValueError("non-positive lane width")

        lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
        repeated = np.flatnonzero(lengths == 0.0)
        if repeated.size:
            raise ValueError(f"repeated centerline vertex at index {int(repeated[0]) + 1}")

        points.setflags(write=False)
        widths.setflags(write=False)
        object.__setattr__(self, "centerline", points)
        object.__setattr__(self, "width", widths)

    @cached_property
    def segment_lengths(self) -> np.ndarray:
        """Length of each segment (m)."""
        return np.linalg.norm(np.diff(self.centerline, axis=0), axis=1)

    @cached_property
    def stations(self) -> np.ndarray:
        """Arc length at every vertex, starting at 0 (m)."""
        return np.concatenate(([0.0], np.cumsum(self.segment_lengths)))

    @property
    def length(self) -> float:
        """Total centerline length (m)."""
        return float(self.stations[-1])

    def point_at(self, station: float) -> tuple[np.ndarray, float]:
        """Return the centerline point and width at an arc-length station.

        Args:
            station: Arc length from the first vertex, clamped to the lane

        Returns:
            Tuple of (point, width)
        """
        s = min(max(station, 0.0), self.length)
        x = np.interp(s, self.stations, self.centerline[:, 0])
        y = np.interp(s, self.stations, self.centerline[:, 1])
        index = int(np.clip(np.searchsorted(self.stations, s, side="right") - 1, 0, self.width.size - 1))
        return np.array([x, y]), float(self.width[index])

    def to_dict(self) -> LaneDict:
        """Serialize the lane to its JSON shape."""
        return {
            "centerline": [[float(x), float(y)] for x, y in self.centerline],
            "width": [float(w) for w in self.width],
        }


@dataclass(frozen=True, eq=False)
class Road:
    """A directed road made of parallel lanes.

    Attributes:
        id: Road identifier
        lanes: Lanes of the road, index 0 first
        successors: Ids of roads reachable at the end of this road
    """

    id: str
    lanes: tuple[Lane, ...]
    successors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        """Check road invariants."""
        if not self.lanes:
            raise ValueError("road needs at least one lane")

    @property
    def total_lane_length(self) -> float:
        """Sum of all lane lengths (m)."""
        return float(sum(lane.length for lane in self.lanes))

    def to_dict(self) -> RoadDict:
        """Serialize the road to its JSON shape."""
        return {
            "id": self.id,
            "lanes": [lane.to_dict() for lane in self.lanes],
            "successors": list(self.successors),
        }


@dataclass(frozen=True)
class Junction:
    """A connection point between roads, derived from road successors.

    Attributes:
        id: Junction identifier (J0, J1, ... in order of incoming road id)
        incoming: Roads ending at the junction
        outgoing: Roads starting at the junction
    """

    id: str
    incoming: tuple[str, ...]
    outgoing: tuple[str, ...]


@dataclass(frozen=True)
class SignalSchedule:
    """Fixed-time signal at the exit of a road.

    Attributes:
        road_id: Road controlled by the signal
        first_green: Time of a green onset (s)
        green_time: Green duration within each cycle (s)
        cycle: Cycle length, 45 or 90 seconds
    """

    road_id: str
    first_green: float
    green_time: float
    cycle: float

    def __post_init__(self) -> None:
        """Check schedule invariants."""
        if float(self.cycle) not in SIGNAL_CYCLES:
            raise ValueError(f"cycle must be one of {SIGNAL_CYCLES}, got {self.cycle}")
        if not 0.0 < self.green_time < self.cycle:
            raise ValueError("green_time must lie strictly between 0 and cycle")
        if self.first_green < 0.0:
            raise ValueError("first_green must be non-negative")

    def to_dict(self) -> SignalDict:
        """Serialize the schedule to its JSON shape."""
        return {
            "road_id": self.road_id,
            "first_green": float(self.first_green),
            "green_time": float(self.green_time),
            "cycle": float(self.cycle),
        }


@dataclass(frozen=True)
class ProjectedPoint:
    """Nearest on-road point to a query.

    Attributes:
        position: On-road point (m)
        road_id: Road containing the point
        lane_index: Lane containing the point
        station: Arc length of the point along the lane centerline (m)
        signed_lateral_offset: Offset from the centerline, positive to the left (m)
        distance_moved: Distance from the query to the projection (m)
    """

    position: np.ndarray
    road_id: str
    lane_index: int
    station: float
    signed_lateral_offset: float
    distance_moved: float


class Waypoints(NamedTuple):
    """Route waypoints ahead of a position.

    Attributes:
        points: Waypoint coordinates, shape (count, 2)
        widths: Road width at each waypoint, shape (count,)
    """

    points: np.ndarray
    widths: np.ndarray


class RoutePath(NamedTuple):
    """Lane centerlines of a route joined into one polyline.

    Attributes:
        vertices: Path vertices, shape (n, 2)
        stations: Arc length at every vertex, shape (n,)
        widths: Width of every segment, shape (n - 1,)
        road_starts: Arc length where each route road begins
        road_ends: Arc length where each route road ends
    """

    vertices: np.ndarray
    stations: np.ndarray
    widths: np.ndarray
    road_starts: np.ndarray
    road_ends: np.ndarray

    @property
    def length(self) -> float:
        """Total path length (m)."""
        return float(self.stations[-1])

    def point_at(self, station: float | np.ndarray) -> np.ndarray:
        """Interpolate path points at arc-length stations (clamped)."""
        s = np.clip(station, 0.0, self.length)
        return np.stack(
            (np.interp(s, self.stations, self.vertices[:, 0]), np.interp(s, self.stations, self.vertices[:, 1])),
            axis=-1,
        )


class _SegmentTable(NamedTuple):
    """All lane segments of a network in tie-break order."""

    starts: np.ndarray
    units: np.ndarray
    normals: np.ndarray
    lengths: np.ndarray
    half_widths: np.ndarray
    station_offsets: np.ndarray
    road_index: np.ndarray
    lane_index: np.ndarray
    road_ids: tuple[str, ...]
    road_slices: dict[str, slice]


class _SegmentGrid(NamedTuple):
    """Uniform grid over segment bounding boxes."""

    cells: dict[tuple[int, int], np.ndarray]
    bounds: tuple[int, int, int, int]


@dataclass(frozen=True, eq=False)
class RoadNetwork:
    """Immutable road network.

    Roads keep the order of the source document; projection ties are broken
    by lowest (road id, lane index, station) regardless of that order.

    Attributes:
        roads: All roads
        signals: Fixed-time signals, at most one per road
    """

    roads: tuple[Road, ...]
    signals: tuple[SignalSchedule, ...] = ()
    _path_cache: dict[tuple[tuple[str, ...], int], RoutePath] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        """Check cross-references between roads and signals."""
        if not self.roads:
            raise NetworkFormatError("network has no roads")
        ids = [road.id for road in self.roads]
        if len(set(ids)) != len(ids):
            raise NetworkFormatError("duplicate road id")
        known = set(ids)
        for i, road in enumerate(self.roads):
            for j, successor in enumerate(road.successors):
                if successor not in known:
                    raise NetworkFormatError(
                        f"roads[{i}].successors[{j}]: unknown road id {successor!r}"
                    )
        seen: set[str] = set()
        for i, signal in enumerate(self.signals):
            if signal.road_id not in known:
                raise NetworkFormatError(f"signals[{i}].road_id: unknown road id {signal.road_id!r}")
            if signal.road_id in seen:
                raise NetworkFormatError(f"signals[{i}].road_id: duplicate signal for {signal.road_id!r}")
            seen.add(signal.road_id)

    @cached_property
    def _road_by_id(self) -> dict[str, Road]:
        return {road.id: road for road in self.roads}

    @cached_property
    def _signal_by_road(self) -> dict[str, SignalSchedule]:
        return {signal.road_id: signal for signal in self.signals}

    def road(self, road_id: str) -> Road:
        """Return a road by id.

        Raises:
            UnknownRoadError: If the road does not exist
        """
        try:
            return self._road_by_id[road_id]
        except KeyError as err:
            raise UnknownRoadError(f"unknown road id: {road_id!r}") from err

    def has_road(self, road_id: str) -> bool:
        """Return whether a road exists."""
        return road_id in self._road_by_id

    def signal_for(self, road_id: str) -> SignalSchedule | None:
        """Return the signal controlling a road, or None if unsignaled."""
        return self._signal_by_road.get(road_id)

    @cached_property
    def junctions(self) -> tuple[Junction, ...]:
        """Junctions derived from successor links.

        A junction groups every road end and road start joined by any
        successor link, directly or through other links.
        """
        parent: dict[tuple[str, str], tuple[str, str]] = {}

        def find(node: tuple[str, str]) -> tuple[str, str]:
            parent.setdefault(node, node)
            while parent[node] != node:
                parent[node] = parent[parent[node]]
                node = parent[node]
            return node

        for road in self.roads:
            for successor in road.successors:
                a, b = find(("end", road.id)), find(("start", successor))
                if a != b:
                    parent[b] = a

        groups: dict[tuple[str, str], tuple[set[str], set[str]]] = {}
        for node in list(parent):
            incoming, outgoing = groups.setdefault(find(node), (set(), set()))
            (incoming if node[0] == "end" else outgoing).add(node[1])

        ordered = sorted(
            (tuple(sorted(incoming)), tuple(sorted(outgoing)))
            for incoming, outgoing in groups.values()
        )
        return tuple(
            Junction(id=f"J{i}", incoming=incoming, outgoing=outgoing)
            for i, (incoming, outgoing) in enumerate(ordered)
        )

    @cached_property
    def _segments(self) -> _SegmentTable:
        """Flatten every lane segment into arrays sorted for tie-breaking."""
        starts, units, normals, lengths, halves, offsets = [], [], [], [], [], []
        road_index, lane_index = [], []
        road_ids = tuple(sorted(self._road_by_id))
        road_slices: dict[str, slice] = {}
        count = 0
        for r, road_id in enumerate(road_ids):
            first = count
            for position, lane in enumerate(self._road_by_id[road_id].lanes):
                vectors = np.diff(lane.centerline, axis=0)
                seg_len = lane.segment_lengths
                unit = vectors / seg_len[:, None]
                starts.append(lane.centerline[:-1])
                units.append(unit)
                normals.append(np.column_stack((-unit[:, 1], unit[:, 0])))
                lengths.append(seg_len)
                halves.append(lane.width / 2.0)
                offsets.append(lane.stations[:-1])
                road_index.append(np.full(seg_len.size, r))
                lane_index.append(np.full(seg_len.size, position))
                count += seg_len.size
            road_slices[road_id] = slice(first, count)
        return _SegmentTable(
            starts=np.concatenate(starts),
            units=np.concatenate(units),
            normals=np.concatenate(normals),
            lengths=np.concatenate(lengths),
            half_widths=np.concatenate(halves),
            station_offsets=np.concatenate(offsets),
            road_index=np.concatenate(road_index),
            lane_index=np.concatenate(lane_index),
            road_ids=road_ids,
            road_slices=road_slices,
        )

    @cached_property
    def _grid(self) -> _SegmentGrid:
        """Register each segment rectangle in every grid cell its bbox touches."""
        table = self._segments
        ends = table.starts + table.units * table.lengths[:, None]
        offset = table.normals * table.half_widths[:, None]
        corners = np.stack(
            (table.starts + offset, table.starts - offset, ends + offset, ends - offset),
            axis=1,
        )
        low = np.floor(corners.min(axis=1) / GRID_CELL_SIZE).astype(np.int64)
        high = np.floor(corners.max(axis=1) / GRID_CELL_SIZE).astype(np.int64)

        buckets: dict[tuple[int, int], list[int]] = {}
        for index in range(low.shape[0]):
            for i in range(low[index, 0], high[index, 0] + 1):
                for j in range(low[index, 1], high[index, 1] + 1):
                    buckets.setdefault((int(i), int(j)), []).append(index)
        cells = {key: np.asarray(value, dtype=np.int64) for key, value in buckets.items()}
        bounds = (
            int(low[:, 0].min()),
            int(high[:, 0].max()),
            int(low[:, 1].min()),
            int(high[:, 1].max()),
        )
        return _SegmentGrid(cells=cells, bounds=bounds)

    def _evaluate(self, point: np.ndarray, candidates: np.ndarray) -> tuple[float, int, np.ndarray, float, float]:
        """Project a point onto candidate segments.

        Args:
            point: Query point
            candidates: Segment indices in ascending order

        Returns:
            Tuple of (distance, segment index, position, station along segment, lateral offset)
        """
        table = self._segments
        rel = point - table.starts[candidates]
        along = np.clip(np.einsum("ij,ij->i", rel, table.units[candidates]), 0.0, table.lengths[candidates])
        half = table.half_widths[candidates]
        lateral = np.clip(np.einsum("ij,ij->i", rel, table.normals[candidates]), -half, half)
        projected = (
            table.starts[candidates]
            + table.units[candidates] * along[:, None]
            + table.normals[candidates] * lateral[:, None]
        )
        distances = np.linalg.norm(point - projected, axis=1)
        best = int(np.argmin(distances))
        return (
            float(distances[best]),
            int(candidates[best]),
            projected[best],
            float(along[best]),
            float(lateral[best]),
        )

    def _result(self, segment: int, position: np.ndarray, along: float, lateral: float, distance: float) -> ProjectedPoint:
        table = self._segments
        return ProjectedPoint(
            position=position,
            road_id=table.road_ids[int(table.road_index[segment])],
            lane_index=int(table.lane_index[segment]),
            station=float(table.station_offsets[segment] + along),
            signed_lateral_offset=lateral,
            distance_moved=distance,
        )

    def project_on_roads(self, point: Sequence[float] | np.ndarray, road_ids: Iterable[str]) -> ProjectedPoint | None:
        """Project a point onto a restricted set of roads.

        Args:
            point: Query point
            road_ids: Roads to search; unknown ids are ignored

        Returns:
            Nearest on-road point among those roads, or None if none exist
        """
        table = self._segments
        slices = [table.road_slices[r] for r in dict.fromkeys(road_ids) if r in table.road_slices]
        if not slices:
            return None
        candidates = np.unique(np.concatenate([np.arange(s.start, s.stop) for s in slices]))
        query = np.asarray(point, dtype=np.float64)
        distance, segment, position, along, lateral = self._evaluate(query, candidates)
        return self._result(segment, position, along, lateral, distance)

    def project(self, point: Sequence[float] | np.ndarray) -> ProjectedPoint:
        """Project a point onto the whole network using the spatial grid.

        Args:
            point: Query point

        Returns:
            Nearest on-road point
        """
        query = np.asarray(point, dtype=np.float64)
        grid = self._grid
        ci = int(math.floor(query[0] / GRID_CELL_SIZE))
        cj = int(math.floor(query[1] / GRID_CELL_SIZE))
        imin, imax, jmin, jmax = grid.bounds
        outside = max(0, imin - ci, ci - imax, jmin - cj, cj - jmax)
        total = self._segments.lengths.size

        if outside > _MAX_OUTSIDE_RINGS:
            distance, segment, position, along, lateral = self._evaluate(query, np.arange(total))
            return self._result(segment, position, along, lateral, distance)

        max_ring = max(abs(ci - imin), abs(ci - imax), abs(cj - jmin), abs(cj - jmax))
        seen = np.zeros(total, dtype=bool)
        best: tuple[float, int, np.ndarray, float, float] | None = None
        ring = 0
        while True:
            found = [grid.cells[key] for key in _ring_cells(ci, cj, ring) if key in grid.cells]
            if found:
                candidates = np.unique(np.concatenate(found))
                candidates = candidates[~seen[candidates]]
                if candidates.size:
                    seen[candidates] = True
                    result = self._evaluate(query, candidates)
                    if best is None or result[0] < best[0] or (result[0] == best[0] and result[1] < best[1]):
                        best = result
            # Unseen segments lie outside the searched block, at least ring * cell away
            if best is not None and best[0] < ring * GRID_CELL_SIZE:
                break
            if ring >= max_ring:
                break
            ring += 1

        if best is None:
            best = self._evaluate(query, np.arange(total))
        distance, segment, position, along, lateral = best
        return self._result(segment, position, along, lateral, distance)

    def route_path(self, route: Sequence[str], lane_index: int = 0) -> RoutePath:
        """Concatenate lane centerlines along a route.

        Each road contributes the lane with the given index, or its last
        lane if it has fewer. A gap between consecutive roads becomes a
        connecting segment with the width of the following road.

        Args:
            route: Road ids in driving order
            lane_index: Preferred lane on every road

        Returns:
            The concatenated path
        """
        key = (tuple(route), lane_index)
        cached = self._path_cache.get(key)
        if cached is not None:
            return cached

        points: list[np.ndarray] = []
        widths: list[float] = []
        first_vertex: list[int] = []
        last_vertex: list[int] = []
        for road_id in route:
            road = self.road(road_id)
            lane = road.lanes[min(lane_index, len(road.lanes) - 1)]
            vertices = lane.centerline
            lane_widths = [float(w) for w in lane.width]
            if points:
                if np.array_equal(points[-1], vertices[0]):
                    first_vertex.append(len(points) - 1)
                    vertices = vertices[1:]
                else:
                    # Connector from the previous road end
                    first_vertex.append(len(points))
                    lane_widths.insert(0, lane_widths[0])
            else:
                first_vertex.append(0)
            points.extend(vertices)
            widths.extend(lane_widths)
            last_vertex.append(len(points) - 1)

        vertices_array = np.asarray(points, dtype=np.float64)
        stations = np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(vertices_array, axis=0), axis=1))))
        result = RoutePath(
            vertices=vertices_array,
            stations=stations,
            widths=np.asarray(widths, dtype=np.float64),
            road_starts=stations[first_vertex],
            road_ends=stations[last_vertex],
        )
        self._path_cache[key] = result
        return result

    def to_document(self) -> NetworkDocument:
        """Serialize the network to its JSON document."""
        return {
            "version": NETWORK_FORMAT_VERSION,
            "roads": [road.to_dict() for road in self.roads],
            "signals": [signal.to_dict() for signal in self.signals],
        }


def _ring_cells(ci: int, cj: int, ring: int) -> Iterator[tuple[int, int]]:
    """Yield the grid cells at Chebyshev distance `ring` from (ci, cj)."""
    if ring == 0:
        yield (ci, cj)
        return
    for i in range(ci - ring, ci + ring + 1):
        yield (i, cj - ring)
        yield (i, cj + ring)
    for j in range(cj - ring + 1, cj + ring):
        yield (ci - ring, j)
        yield (ci + ring, j)


def network_from_document(document: Any, source: str = "<document>") -> RoadNetwork:
    """Build a network from a parsed JSON document.

    Args:
        document: Parsed JSON value
        source: Name used in error messages

    Returns:
        Validated road network

    Raises:
        NetworkFormatError: If a field is missing, mistyped or violates an invariant
    """
    if not isinstance(document, dict):
        raise NetworkFormatError(f"{source}: top level must be an object")
    raw_roads = document.get("roads")
    if not isinstance(raw_roads, list):
        raise NetworkFormatError(f"{source}: roads: expected a list")

    roads: list[Road] = []
    for i, raw_road in enumerate(raw_roads):
        where = f"{source}: roads[{i}]"
        if not isinstance(raw_road, dict):
            raise NetworkFormatError(f"{where}: expected an object")
        road_id = raw_road.get("id")
        if not isinstance(road_id, (str, int)):
            raise NetworkFormatError(f"{where}.id: expected a string")
        raw_lanes = raw_road.get("lanes")
        if not isinstance(raw_lanes, list) or not raw_lanes:
            raise NetworkFormatError(f"{where}.lanes: expected a non-empty list")
        lanes: list[Lane] = []
        for j, raw_lane in enumerate(raw_lanes):
            if not isinstance(raw_lane, dict) or "centerline" not in raw_lane or "width" not in raw_lane:
                raise NetworkFormatError(f"{where}.lanes[{j}]: expected centerline and width")
            raw_width = raw_lane["width"]
            for k, value in enumerate(raw_width if isinstance(raw_width, list) else [raw_width]):
                if isinstance(value, (int, float)) and not value > 0:
                    raise NetworkFormatError(f"{where}.lanes[{j}].width[{k}]: non-positive lane width")
            try:
                lanes.append(Lane(centerline=raw_lane["centerline"], width=raw_lane["width"]))
            except (TypeError, ValueError) as err:
                raise NetworkFormatError(f"{where}.lanes[{j}]: {err}") from err
        successors = raw_road.get("successors", [])
        if not isinstance(successors, list):
            raise NetworkFormatError(f"{where}.successors: expected a list")
        roads.append(Road(id=str(road_id), lanes=tuple(lanes), successors=tuple(str(s) for s in successors)))

    # Junctions are derived from successors; listed ones are only checked
    known = {road.id for road in roads}
    for i, raw_junction in enumerate(document.get("junctions", []) or []):
        for key in ("incoming", "outgoing"):
            for j, road_id in enumerate(raw_junction.get(key, []) if isinstance(raw_junction, dict) else []):
                if str(road_id) not in known:
                    raise NetworkFormatError(
                        f"{source}: junctions[{i}].{key}[{j}]: unknown road id {road_id!r}"
                    )

    signals: list[SignalSchedule] = []
    for i, raw_signal in enumerate(document.get("signals", []) or []):
        where = f"{source}: signals[{i}]"
        try:
            signals.append(
                SignalSchedule(
                    road_id=str(raw_signal["road_id"]),
                    first_green=float(raw_signal["first_green"]),
                    green_time=float(raw_signal["green_time"]),
                    cycle=float(raw_signal["cycle"]),
                )
            )
        except KeyError as err:
            raise NetworkFormatError(f"{where}: missing field {err.args[0]!r}") from err
        except (TypeError, ValueError) as err:
            raise NetworkFormatError(f"{where}: {err}") from err

    try:
        return RoadNetwork(roads=tuple(roads), signals=tuple(signals))
    except NetworkFormatError as err:
        raise NetworkFormatError(f"{source}: {err}") from err


def load_network(path: str | Path) -> RoadNetwork:
    """Load a road network from its JSON document.

    Args:
        path: Network file

    Returns:
        Validated road network

    Raises:
        NetworkFormatError: On syntax errors (with line and column) or invariant violations
    """
    source = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise NetworkFormatError(f"{source}: cannot read network: {err}") from err
    try:
        document = json.loads(text)
    except json.JSONDecodeError as err:
        raise NetworkFormatError(f"{source}:{err.lineno}:{err.colno}: {err.msg}") from err

    network = network_from_document(document, source)
    _LOGGER.info(
        "Loaded network %s: %d roads, %d junctions, %d signals",
        source,
        len(network.roads),
        len(network.junctions),
        len(network.signals),
    )
    return network


def save_network(network: RoadNetwork, path: str | Path) -> None:
    """Write a network to its JSON document.

    Args:
        network: Network to save
        path: Destination file
    """
    Path(path).write_text(json.dumps(network.to_document(), indent=2) + "\n", encoding="utf-8")
    _LOGGER.debug("Saved network to %s", path)


def project_to_road(
    point: Sequence[float] | np.ndarray,
    network: RoadNetwork,
    hint: Sequence[str] | None = None,
    threshold: float = DEFAULT_OFFROAD_THRESHOLD,
) -> ProjectedPoint:
    """Project a point onto the nearest on-road point.

    Hint roads are searched first; their result is accepted when it lies
    within the off-road threshold, otherwise the whole network is searched.

    Args:
        point: Query point
        network: Road network
        hint: Optional road ids to try first (typically the route ahead)
        threshold: Acceptance distance for the hint search (m)

    Returns:
        Nearest on-road point
    """
    if hint:
        local = network.project_on_roads(point, hint)
        if local is not None and local.distance_moved <= threshold:
            return local
    return network.project(point)


def offroad_distance(point: Sequence[float] | np.ndarray, network: RoadNetwork) -> float:
    """Return the distance from a point to the drivable area (m)."""
    return network.project(point).distance_moved


def is_offroad(distance: float, threshold: float = DEFAULT_OFFROAD_THRESHOLD) -> bool:
    """Return whether an off-road distance counts as off-road (strictly more than threshold)."""
    return distance > threshold


def road_density(network: RoadNetwork, road_id: str, vehicle_positions: Iterable[ProjectedPoint]) -> float:
    """Return the vehicle density of a road in vehicles per lane kilometer.

    Args:
        network: Road network
        road_id: Road to aggregate
        vehicle_positions: Projected vehicle positions

    Returns:
        Count of vehicles on the road divided by its total lane length in km
    """
    road = network.road(road_id)
    count = sum(1 for projected in vehicle_positions if projected.road_id == road_id)
    return count / (road.total_lane_length / 1000.0)


def light_state(schedule: SignalSchedule, t: float) -> LightState:
    """Return the signal state at a time.

    Green iff ((t - first_green) mod cycle) lies in [0, green_time).

    Args:
        schedule: Fixed-time signal
        t: Time (s)

    Returns:
        LightState.GREEN or LightState.RED
    """
    phase = (t - schedule.first_green) % schedule.cycle
    return LightState.GREEN if phase < schedule.green_time else LightState.RED


def road_light_state(network: RoadNetwork, road_id: str, t: float) -> LightState:
    """Return the signal state of a road, LightState.NONE if unsignaled."""
    schedule = network.signal_for(road_id)
    if schedule is None:
        return LightState.NONE
    return light_state(schedule, t)


def edit_road(network: RoadNetwork, road_id: str, new_lanes: Sequence[Lane]) -> RoadNetwork:
    """Return a copy of the network with one road's lanes replaced.

    Args:
        network: Source network
        road_id: Road to edit
        new_lanes: Replacement lanes

    Returns:
        New network; connectivity and signals are unchanged

    Raises:
        UnknownRoadError: If the road does not exist
        NetworkFormatError: If no lanes are given
    """
    old = network.road(road_id)
    if not new_lanes:
        raise NetworkFormatError(f"road {road_id!r}: road needs at least one lane")
    for lane in new_lanes:
        if not isinstance(lane, Lane):
            raise NetworkFormatError(f"road {road_id!r}: invalid lane {lane!r}")
    edited = replace(old, lanes=tuple(new_lanes))
    roads = tuple(edited if road.id == road_id else road for road in network.roads)
    _LOGGER.debug("Edited road %s: %d lanes", road_id, len(new_lanes))
    return RoadNetwork(roads=roads, signals=network.signals)


def waypoints_along_route(
    network: RoadNetwork,
    route: Sequence[str],
    start: Sequence[float] | np.ndarray,
    interval: float = DEFAULT_ROUTE_POINT_INTERVAL,
    count: int = DEFAULT_ROUTE_POINTS,
) -> Waypoints:
    """Sample waypoints along the route ahead of a position.

    The start is projected onto the first route road; its lane is followed
    through the rest of the route. Waypoint k (1-based) lies k * interval
    meters of arc length ahead of the projected start. Past the end of the
    route the final point is repeated.

    Args:
        network: Road network
        route: Remaining route, current road first
        start: Current position
        interval: Arc-length spacing (m)
        count: Number of waypoints

    Returns:
        Waypoints with `count` points and widths

    Raises:
        ValueError: If the route is empty or interval/count are not positive
    """
    if not route:
        raise ValueError("empty route")
    if interval <= 0.0 or count <= 0:
        raise ValueError("interval and count must be positive")

    anchor = network.project_on_roads(start, [route[0]])
    if anchor is None:
        raise UnknownRoadError(f"unknown road id: {route[0]!r}")
    path = network.route_path(route, anchor.lane_index)
    vertices, stations, widths = path.vertices, path.stations, path.widths

    targets = np.minimum(anchor.station + interval * np.arange(1, count + 1), stations[-1])
    points = np.column_stack(
        (np.interp(targets, stations, vertices[:, 0]), np.interp(targets, stations, vertices[:, 1]))
    )
    segment = np.clip(np.searchsorted(stations, targets, side="right") - 1, 0, widths.size - 1)
    return Waypoints(points=points, widths=widths[segment])
