"""Tests for the LQR trajectory smoother."""

from __future__ import annotations

import numpy as np
import pytest

from lasil_traffic.lqr import LqrSmoother, lqr_smooth


def dense_solution(p0: np.ndarray, v0: np.ndarray, targets: np.ndarray, dt: float, eta_a: float) -> np.ndarray:
    """Optimal accelerations from a stacked least-squares problem."""
    horizon = targets.shape[0]
    steps = np.arange(1, horizon + 1)
    # p[t] = p0 + t dt v0 + sum_{s < t} dt² (t - s) a[s]
    lag = steps[:, None] - np.arange(horizon)[None, :]
    influence = np.where(lag > 0, dt * dt * lag, 0.0)
    base = p0[None, :] + steps[:, None] * dt * v0[None, :]
    design = np.vstack((influence, np.sqrt(eta_a) * np.eye(horizon)))
    rhs = np.vstack((targets - base, np.zeros((horizon, 2))))
    return np.linalg.lstsq(design, rhs, rcond=None)[0]


@pytest.mark.parametrize("eta_a", [0.1, 1.0, 25.0])
def test_matches_dense_least_squares(eta_a: float) -> None:
    rng = np.random.default_rng(int(eta_a * 10))
    p0, v0 = rng.normal(size=2), rng.normal(size=2)
    targets = np.cumsum(rng.normal(scale=2.0, size=(8, 2)), axis=0)
    plan = lqr_smooth(p0, v0, targets, dt=0.4, eta_a=eta_a)
    expected = dense_solution(p0, v0, targets, 0.4, eta_a)
    np.testing.assert_allclose(plan.accelerations, expected, atol=1e-8)


def test_constant_velocity_targets_cost_nothing() -> None:
    p0, v0 = np.array([1.0, 2.0]), np.array([10.0, -1.0])
    targets = p0 + np.outer(0.4 * np.arange(1, 6), v0)
    plan = lqr_smooth(p0, v0, targets, dt=0.4, eta_a=1.0)
    np.testing.assert_allclose(plan.accelerations, 0.0, atol=1e-10)
    np.testing.assert_allclose(plan.positions, targets, atol=1e-10)
    assert plan.cost == pytest.approx(0.0, abs=1e-12)


def test_plan_follows_dynamics() -> None:
    p0, v0 = np.zeros(2), np.array([3.0, 0.0])
    targets = np.column_stack((np.linspace(2.0, 20.0, 6), np.linspace(0.0, 5.0, 6)))
    plan = lqr_smooth(p0, v0, targets, dt=0.5, eta_a=0.5)
    p, v = p0, v0
    for t in range(6):
        p, v = p + 0.5 * v + 0.25 * plan.accelerations[t], v + 0.5 * plan.accelerations[t]
        np.testing.assert_allclose(plan.positions[t], p)
        np.testing.assert_allclose(plan.velocities[t], v)


def test_larger_weight_smooths_more() -> None:
    targets = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 0.0], [5.0, 0.0]])
    soft = lqr_smooth(np.zeros(2), np.zeros(2), targets, eta_a=0.01)
    stiff = lqr_smooth(np.zeros(2), np.zeros(2), targets, eta_a=100.0)
    assert np.sum(stiff.accelerations**2) < np.sum(soft.accelerations**2)


@pytest.mark.parametrize("kwargs", [{"dt": 0.0}, {"eta_a": 0.0}, {"horizon": 0}])
def test_invalid_settings(kwargs: dict) -> None:
    with pytest.raises(ValueError):
        LqrSmoother(**kwargs)


def test_target_shape_checked() -> None:
    with pytest.raises(ValueError):
        LqrSmoother(horizon=3).smooth(np.zeros(2), np.zeros(2), np.zeros((4, 2)))
