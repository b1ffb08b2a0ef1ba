"""Finite-difference checks of the reverse-mode operations and Adam."""

from __future__ import annotations

from typing import Callable

import numpy as np
import pytest

from lasil_traffic.diffcore import (
    LOG_2PI,
    ParamStore,
    Tape,
    Var,
    egat_forward,
    segment_softmax,
)
from lasil_traffic.exceptions import EmptyNeighborhoodError, ShapeError

EPS = 1e-6


def check_gradients(build: Callable[[Tape, list[Var]], Var], arrays: list[np.ndarray], seed: int = 0) -> None:
    """Compare tape gradients of sum(w * build(...)) against central differences."""
    rng = np.random.default_rng(seed)
    shape_tape = Tape()
    out_shape = build(shape_tape, [shape_tape.constant(a) for a in arrays]).shape
    weights = rng.normal(size=out_shape)

    def loss_value(values: list[np.ndarray]) -> float:
        tape = Tape()
        out = build(tape, [tape.constant(v) for v in values])
        return float(np.sum(weights * out.value))

    tape = Tape()
    variables = [tape.variable(a) for a in arrays]
    out = build(tape, variables)
    tape.backward(tape.sum(tape.mul(out, tape.constant(weights))))

    for index, array in enumerate(arrays):
        numeric = np.zeros_like(array)
        for position in np.ndindex(array.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[index][position] += EPS
            minus[index][position] -= EPS
            numeric[position] = (loss_value(plus) - loss_value(minus)) / (2 * EPS)
        analytic = variables[index].grad if variables[index].grad is not None else np.zeros_like(array)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6, err_msg=f"input {index}")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


def test_linear(rng: np.random.Generator) -> None:
    check_gradients(
        lambda t, v: t.linear(v[0], v[1], v[2]),
        [rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)],
    )


def test_leaky_relu_exp_and_clip(rng: np.random.Generator) -> None:
    check_gradients(lambda t, v: t.leaky_relu(v[0]), [rng.normal(size=(3, 4))])
    check_gradients(lambda t, v: t.exp(v[0]), [rng.normal(size=(2, 3))])
    # Stay away from the clip boundary
    values = np.array([[-3.0, -0.5, 0.4, 2.5]])
    check_gradients(lambda t, v: t.clip(v[0], -1.0, 1.0), [values])


def test_arithmetic_and_layout(rng: np.random.Generator) -> None:
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    check_gradients(lambda t, v: t.mul(t.sub(v[0], v[1]), t.add(v[0], v[1])), [a, b])
    check_gradients(lambda t, v: t.columns(t.concat([v[0], t.scale(v[1], 3.0)]), 1, 3), [a, b])
    check_gradients(lambda t, v: t.mean(v[0]), [a])


def test_egat(rng: np.random.Generator) -> None:
    src = np.array([0, 0, 1, 1, 1, 2])
    dst = np.array([0, 1, 0, 1, 2, 2])
    d, de = 3, 2
    check_gradients(
        lambda t, v: t.egat(v[0], v[1], src, dst, v[2], v[3]),
        [
            rng.normal(size=(3, d)),
            rng.normal(size=(6, de)),
            rng.normal(size=(2 * d + de, d)),
            rng.normal(size=2 * d + de),
        ],
    )


def test_gaussian_logpdf(rng: np.random.Generator) -> None:
    mask = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    check_gradients(
        lambda t, v: t.gaussian_logpdf(v[0], v[1], v[2], mask),
        [rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))],
    )


def test_kl_and_reparameterize(rng: np.random.Generator) -> None:
    noise = rng.normal(size=(2, 3))
    check_gradients(lambda t, v: t.kl_diag_normal(v[0], v[1]), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])
    check_gradients(
        lambda t, v: t.reparameterize(v[0], v[1], noise), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]
    )


def test_known_values() -> None:
    tape = Tape()
    zeros = tape.constant(np.zeros((1, 2)))
    np.testing.assert_allclose(tape.gaussian_logpdf(zeros, zeros, zeros).value, [-LOG_2PI])
    kl = tape.kl_diag_normal(tape.constant(np.ones((1, 4))), tape.constant(np.zeros((1, 4))))
    np.testing.assert_allclose(kl.value, [2.0])


def test_segment_softmax_sums_to_one(rng: np.random.Generator) -> None:
    index = np.array([0, 0, 1, 2, 2, 2])
    alpha = segment_softmax(rng.normal(size=6) * 50.0, index, 3)
    np.testing.assert_allclose(np.bincount(index, weights=alpha), 1.0)


def test_egat_single_self_edge_is_message_only() -> None:
    h = np.array([[1.0, -2.0]])
    weight = np.eye(4, 2)
    out = egat_forward(h, np.zeros((1, 0)), np.array([0]), np.array([0]), weight, np.ones(4))
    np.testing.assert_allclose(out.attention, [1.0])
    np.testing.assert_allclose(out.output, [[1.0, -0.02]])


class TestShapeErrors:
    def test_linear_mismatch(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError):
            tape.linear(tape.constant(np.zeros((2, 3))), tape.constant(np.zeros((4, 1))))

    def test_add_mismatch(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError):
            tape.add(tape.constant(np.zeros(2)), tape.constant(np.zeros(3)))

    def test_non_scalar_backward(self) -> None:
        tape = Tape()
        with pytest.raises(ShapeError):
            tape.backward(tape.variable(np.zeros(2)))

    def test_node_without_edge(self) -> None:
        with pytest.raises(EmptyNeighborhoodError):
            egat_forward(np.zeros((2, 1)), np.zeros((1, 0)), np.array([0]), np.array([0]), np.zeros((2, 1)), np.zeros(2))


class TestParamStore:
    def test_glorot_bounds(self, rng: np.random.Generator) -> None:
        store = ParamStore()
        value = store.add("w", (6, 4), rng)
        assert np.all(np.abs(value) <= np.sqrt(6.0 / 10.0))
        assert store.shapes() == {"w": (6, 4)}

    def test_duplicate_and_unknown_init(self, rng: np.random.Generator) -> None:
        store = ParamStore()
        store.add("b", (3,), init="zeros")
        with pytest.raises(ValueError):
            store.add("b", (3,), init="zeros")
        with pytest.raises(ValueError):
            store.add("c", (3,), rng, init="normal")

    def test_adam_first_step_moves_by_learning_rate(self) -> None:
        store = ParamStore()
        store.set("w", np.array([1.0, -1.0, 0.5]))
        store.adam_step({"w": np.array([0.3, -2.0, 0.0])}, lr=0.1)
        np.testing.assert_allclose(store.value("w"), [0.9, -0.9, 0.5], atol=1e-6)
        assert store.state("w")[3] == 1

    def test_param_shared_per_tape(self) -> None:
        store = ParamStore()
        store.set("w", np.ones((2, 2)))
        tape = Tape()
        x = tape.constant(np.ones((1, 2)))
        loss = tape.sum(tape.add(tape.linear(x, tape.param(store, "w")), tape.linear(x, tape.param(store, "w"))))
        tape.backward(loss)
        np.testing.assert_allclose(tape.gradients()["w"], 2.0)

