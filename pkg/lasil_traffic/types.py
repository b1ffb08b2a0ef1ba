"""Type definitions for the LASIL traffic simulator.

This module provides TypedDict classes for the JSON documents read and
written by the package (network, demand, checkpoint, evaluation report),
enabling better type safety and IDE support.
"""

import sys
from typing import TypedDict

if sys.version_info >= (3, 11):
    from typing import NotRequired
else:
    from typing_extensions import NotRequired


class LaneDict(TypedDict):
    """One lane of a road in the network document.

    `width` holds one value per centerline vertex or per segment; the width
    of segment i is width[i].
    """

    centerline: list[list[float]]
    width: list[float]


class RoadDict(TypedDict):
    """One road in the network document."""

    id: str
    lanes: list[LaneDict]
    successors: list[str]


class SignalDict(TypedDict):
    """Fixed-time signal controlling the exit of one road."""

    road_id: str
    first_green: float
    green_time: float
    cycle: float


class NetworkDocument(TypedDict):
    """Top-level road network JSON document."""

    version: NotRequired[int]
    roads: list[RoadDict]
    signals: NotRequired[list[SignalDict]]


class DemandEntryDict(TypedDict):
    """One spawn request in a demand schedule."""

    spawn_time: float
    route: list[str]
    type: str
    speed: NotRequired[float]
    id: NotRequired[str]


class ArrayDict(TypedDict):
    """A dense float64 array serialized with base64."""

    shape: list[int]
    data: str


class ParameterDict(TypedDict):
    """One named parameter with its Adam state."""

    value: ArrayDict
    first_moment: ArrayDict
    second_moment: ArrayDict
    step: int


class CheckpointDocument(TypedDict):
    """Parameter checkpoint file."""

    format: str
    version: int
    params: dict[str, ParameterDict]
    meta: dict[str, float | int | str | bool]


class HistogramDict(TypedDict):
    """Histogram with fixed bin width starting at zero."""

    bin_width: float
    counts: list[int]


class EvalReportDict(TypedDict):
    """Evaluation report JSON document."""

    position_rmse: float | None
    velocity_rmse: float | None
    min_ade: float | None
    offroad_rate: float | None
    road_density_rmse: float | None
    road_speed_rmse: float | None
    road_speed_coverage: float | None
    speed_histogram: HistogramDict
    leader_distance_histogram: HistogramDict
