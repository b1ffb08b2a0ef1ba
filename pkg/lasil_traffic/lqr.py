"""LQR smoothing of predicted trajectories.

Finds the acceleration sequence that tracks a list of target positions
while penalizing acceleration, under the per-axis dynamics

    p[t+1] = p[t] + dt * v[t] + dt² * a[t]
    v[t+1] = v[t] + dt * a[t]

and the cost

    J = Σ_{t=1..T} |p[t] - target[t]|² + eta_a * Σ_{t=0..T-1} |a[t]|²

The problem is a convex quadratic program. It is solved exactly by a
backward Riccati recursion with an affine tracking term. The x and y axes
share the same gains and are solved together as two columns.

Note that the position coupling uses dt² rather than the dt²/2 of the usual
double-integrator discretization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .const import DEFAULT_DT, DEFAULT_FUTURE_STEPS, DEFAULT_LQR_ACCEL_WEIGHT

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class LqrPlan:
    """Planned motion for t = 1..T.

    Attributes:
        positions: Planned positions p[1..T], shape (T, 2)
        velocities: Planned velocities v[1..T], shape (T, 2)
        accelerations: Applied accelerations a[0..T-1], shape (T, 2)
        cost: Objective value J
    """

    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    cost: float


class LqrSmoother:
    """Finite-horizon tracking LQR with precomputed feedback gains.

    Attributes:
        dt: Step length (s)
        eta_a: Acceleration weight
        horizon: Number of steps T
    """

    def __init__(
        self,
        dt: float = DEFAULT_DT,
        eta_a: float = DEFAULT_LQR_ACCEL_WEIGHT,
        horizon: int = DEFAULT_FUTURE_STEPS,
    ) -> None:
        """Initialize the smoother and run the gain recursion.

        Args:
            dt: Step length (s), positive
            eta_a: Acceleration weight, positive
            horizon: Number of steps T, at least 1
        """
        if dt <= 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        if eta_a <= 0.0:
            raise ValueError(f"eta_a must be positive, got {eta_a}")
        if horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {horizon}")

        self.dt = dt
        self.eta_a = eta_a
        self.horizon = horizon

        self._a = np.array([[1.0, dt], [0.0, 1.0]])
        self._b = np.array([dt * dt, dt])
        self._c = np.array([1.0, 0.0])

        # Gains for control steps 0..T-1: a[t] = -K[t] x[t] - k[t]
        self._gain = np.zeros((horizon, 2))
        self._inv_s = np.zeros(horizon)
        self._closed_loop = np.zeros((horizon, 2, 2))

        p_next = np.outer(self._c, self._c)
        for t in range(horizon - 1, -1, -1):
            pb = p_next @ self._b
            s = eta_a + float(self._b @ pb)
            gain = (pb @ self._a) / s
            self._gain[t] = gain
            self._inv_s[t] = 1.0 / s
            self._closed_loop[t] = self._a - np.outer(self._b, gain)
            p_t = self._a.T @ p_next @ self._a - np.outer(self._a.T @ pb, self._a.T @ pb) / s
            if t >= 1:
                p_t = p_t + np.outer(self._c, self._c)
            p_next = p_t

        _LOGGER.debug("LQR gains: dt=%.3f, eta_a=%.3f, horizon=%d, K[0]=%s", dt, eta_a, horizon, self._gain[0])

    def smooth(
        self,
        p0: Sequence[float] | np.ndarray,
        v0: Sequence[float] | np.ndarray,
        targets: np.ndarray,
    ) -> LqrPlan:
        """Return the exact minimizer of the tracking cost.

        Args:
            p0: Current position (2,)
            v0: Current velocity (2,)
            targets: Target positions for t = 1..T, shape (T, 2)

        Returns:
            Optimal plan
        """
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != (self.horizon, 2):
            raise ValueError(f"targets shape {targets.shape} != {(self.horizon, 2)}")

        # Phase 1: backward pass for the affine term, one column per axis
        offsets = np.zeros((self.horizon, 2))
        q = -np.outer(self._c, targets[-1])
        for t in range(self.horizon - 1, -1, -1):
            offsets[t] = self._inv_s[t] * (self._b @ q)
            q = self._closed_loop[t].T @ q
            if t >= 1:
                q = q - np.outer(self._c, targets[t - 1])

        # Phase 2: forward rollout with the feedback law
        state = np.vstack((np.asarray(p0, dtype=np.float64), np.asarray(v0, dtype=np.float64)))
        positions = np.zeros((self.horizon, 2))
        velocities = np.zeros((self.horizon, 2))
        accelerations = np.zeros((self.horizon, 2))
        for t in range(self.horizon):
            accel = -(self._gain[t] @ state) - offsets[t]
            state = self._a @ state + np.outer(self._b, accel)
            accelerations[t] = accel
            positions[t] = state[0]
            velocities[t] = state[1]

        cost = float(np.sum((positions - targets) ** 2) + self.eta_a * np.sum(accelerations**2))
        return LqrPlan(positions=positions, velocities=velocities, accelerations=accelerations, cost=cost)


@lru_cache(maxsize=16)
def _smoother(dt: float, eta_a: float, horizon: int) -> LqrSmoother:
    return LqrSmoother(dt, eta_a, horizon)


def lqr_smooth(
    p0: Sequence[float] | np.ndarray,
    v0: Sequence[float] | np.ndarray,
    targets: np.ndarray,
    dt: float = DEFAULT_DT,
    eta_a: float = DEFAULT_LQR_ACCEL_WEIGHT,
) -> LqrPlan:
    """Smooth a target trajectory from the state (p0, v0).

    Args:
        p0: Current position (2,)
        v0: Current velocity (2,)
        targets: Target positions for t = 1..T, shape (T, 2)
        dt: Step length (s)
        eta_a: Acceleration weight

    Returns:
        Optimal plan
    """
    targets = np.asarray(targets, dtype=np.float64)
    return _smoother(float(dt), float(eta_a), int(targets.shape[0])).smooth(p0, v0, targets)
