"""Intelligent Driver Model for the synthetic expert generator.

Implements longitudinal car-following with:
- Standard IDM acceleration (free-road term plus interaction term)
- Ballistic position update with speed clamped to [0, desired_speed]
- Per vehicle type parameters from the SUMO baseline table

The controller is stateless; the generator in trajdata owns vehicle state
and decides which vehicle (or stop line) is the leader.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from .const import (
    IDM_COMFORT_DECEL,
    IDM_DELTA,
    IDM_DESIRED_SPEED,
    IDM_MAX_ACCEL,
    IDM_MIN_GAP,
    IDM_TIME_HEADWAY,
    VEHICLE_TYPES,
)

_LOGGER = logging.getLogger(__name__)

# Gaps below this are treated as this value to keep the interaction term finite
_MIN_EFFECTIVE_GAP = 1e-3


@dataclass(frozen=True)
class IdmParams:
    """IDM parameters for one vehicle type.

    Attributes:
        desired_speed: Free-road target speed (m/s)
        max_accel: Maximum acceleration (m/s²)
        comfort_decel: Comfortable deceleration (m/s²)
        min_gap: Standstill bumper-to-bumper gap (m)
        time_headway: Desired time headway (s)
        delta: Free-road acceleration exponent
    """

    desired_speed: float
    max_accel: float = IDM_MAX_ACCEL
    comfort_decel: float = IDM_COMFORT_DECEL
    min_gap: float = IDM_MIN_GAP
    time_headway: float = IDM_TIME_HEADWAY
    delta: float = IDM_DELTA

    def __post_init__(self) -> None:
        """Check that every parameter is strictly positive."""
        for name in ("desired_speed", "max_accel", "comfort_decel", "min_gap", "time_headway", "delta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"IDM parameter {name} must be positive, got {value}")

    def stopping_distance(self, speed: float) -> float:
        """Distance needed to stop with comfortable deceleration (m)."""
        return speed * speed / (2.0 * self.comfort_decel)


def default_idm_params() -> dict[str, IdmParams]:
    """Return the baseline IDM parameter set for every vehicle type."""
    return {vehicle_type: IdmParams(desired_speed=IDM_DESIRED_SPEED[vehicle_type]) for vehicle_type in VEHICLE_TYPES}


class IdmController:
    """Intelligent Driver Model acceleration and integration.

    The acceleration is

        a = a_max * [1 - (v / v0)^delta - (s* / s)^2]

    with the desired dynamic gap

        s* = s0 + v * T + v * dv / (2 * sqrt(a_max * b))

    where dv = v - v_leader is the approach rate and s the current
    bumper-to-bumper gap. Without a leader the interaction term vanishes.

    Attributes:
        params: Parameters of the controlled vehicle
    """

    def __init__(self, params: IdmParams) -> None:
        """Initialize the controller.

        Args:
            params: IDM parameters
        """
        self.params = params

    def desired_gap(self, speed: float, leader_speed: float) -> float:
        """Return the desired dynamic gap s* (m)."""
        p = self.params
        dynamic = speed * p.time_headway + speed * (speed - leader_speed) / (2.0 * math.sqrt(p.max_accel * p.comfort_decel))
        return p.min_gap + max(0.0, dynamic)

    def acceleration(self, speed: float, gap: float | None = None, leader_speed: float = 0.0) -> float:
        """Return the IDM acceleration.

        Args:
            speed: Own speed (m/s)
            gap: Bumper-to-bumper gap to the leader (m), None on a free road
            leader_speed: Leader speed (m/s)

        Returns:
            Acceleration (m/s²)
        """
        p = self.params
        free = 1.0 - (max(speed, 0.0) / p.desired_speed) ** p.delta
        if gap is None:
            return p.max_accel * free
        interaction = (self.desired_gap(speed, leader_speed) / max(gap, _MIN_EFFECTIVE_GAP)) ** 2
        return p.max_accel * (free - interaction)

    def advance(self, speed: float, accel: float, dt: float) -> tuple[float, float]:
        """Integrate one step with the ballistic update.

        The vehicle stops rather than reversing and never exceeds the
        desired speed; both clamps integrate the exact piecewise motion.

        Args:
            speed: Speed at the start of the step (m/s)
            accel: Constant acceleration over the step (m/s²)
            dt: Step length (s)

        Returns:
            Tuple of (distance travelled, new speed)
        """
        v0 = self.params.desired_speed
        new_speed = speed + accel * dt
        if new_speed <= 0.0:
            if accel >= 0.0:
                return 0.0, 0.0
            # Stops within the step
            return -speed * speed / (2.0 * accel), 0.0
        if new_speed > v0 and accel > 0.0:
            to_limit = max(0.0, (v0 - speed) / accel)
            distance = speed * to_limit + 0.5 * accel * to_limit**2 + v0 * (dt - to_limit)
            return distance, v0
        return speed * dt + 0.5 * accel * dt * dt, min(new_speed, v0)
