"""Minimal reverse-mode differentiation for the graph networks.

A Tape records every operation applied to variables that need gradients.
Calling backward on a scalar walks the recorded operations in reverse
order and accumulates gradients into the inputs. Parameters live in a
ParamStore together with their Adam moments.

Only the operations the encoder, decoder and policy need are provided; the
graph attention layer and the Gaussian terms have fused backward passes.
All arrays are float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .const import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, DEFAULT_LEARNING_RATE, LEAKY_RELU_SLOPE, LOGVAR_CLAMP
from .exceptions import EmptyNeighborhoodError, ShapeError

_LOGGER = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class Var:
    """A value on the tape.

    Attributes:
        value: Forward value
        grad: Accumulated gradient, None until something flows back
        requires_grad: Whether gradients are tracked
        name: Parameter name, if the variable is a parameter
    """

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, name: str | None = None) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the value."""
        return tuple(self.value.shape)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


def leaky_relu(x: np.ndarray, slope: float = LEAKY_RELU_SLOPE) -> np.ndarray:
    """Leaky rectifier."""
    return np.where(x > 0.0, x, slope * x)


def leaky_relu_slope(x: np.ndarray, slope: float = LEAKY_RELU_SLOPE) -> np.ndarray:
    """Derivative of the leaky rectifier."""
    return np.where(x > 0.0, 1.0, slope)


def segment_sum(values: np.ndarray, index: np.ndarray, count: int) -> np.ndarray:
    """Sum rows of `values` into `count` segments given by `index`.

    Empty segments are zero.
    """
    result = np.zeros((count,) + values.shape[1:], dtype=np.float64)
    if values.shape[0] == 0:
        return result
    order = np.argsort(index, kind="stable")
    ordered_index = index[order]
    starts = np.flatnonzero(np.concatenate(([True], ordered_index[1:] != ordered_index[:-1])))
    result[ordered_index[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return result


def segment_max(values: np.ndarray, index: np.ndarray, count: int) -> np.ndarray:
    """Maximum of a 1-D array per segment; empty segments are -inf."""
    result = np.full(count, -np.inf)
    if values.shape[0] == 0:
        return result
    order = np.argsort(index, kind="stable")
    ordered_index = index[order]
    starts = np.flatnonzero(np.concatenate(([True], ordered_index[1:] != ordered_index[:-1])))
    result[ordered_index[starts]] = np.maximum.reduceat(values[order], starts)
    return result


def segment_softmax(logits: np.ndarray, index: np.ndarray, count: int) -> np.ndarray:
    """Softmax of a 1-D array within each segment."""
    shifted = np.exp(logits - segment_max(logits, index, count)[index])
    return shifted / segment_sum(shifted, index, count)[index]


@dataclass
class EgatForward:
    """Intermediate values of one graph attention layer."""

    messages: np.ndarray
    logits: np.ndarray
    attention: np.ndarray
    aggregate: np.ndarray
    output: np.ndarray


def egat_forward(
    h: np.ndarray,
    e: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    weight: np.ndarray,
    attention: np.ndarray,
) -> EgatForward:
    """Evaluate one graph attention layer with edge features.

    For node i with neighbors j (edges i -> j, including the self-edge):

        x_ij = [h_i ‖ e_ij ‖ h_j]
        alpha_ij = softmax_j(leaky(attention · x_ij))
        h_i' = leaky(sum_j alpha_ij * (x_ij @ weight))

    The concatenation is never materialized; weight and attention are
    split into the blocks acting on h_i, e_ij and h_j.

    Args:
        h: Node features (n, d)
        e: Edge features (E, de)
        src: Aggregating node of each edge
        dst: Neighbor node of each edge
        weight: Message weights (2d + de, d_out)
        attention: Attention vector (2d + de,)

    Returns:
        Intermediate values and the layer output

    Raises:
        ShapeError: If shapes disagree
        EmptyNeighborhoodError: If a node has no edge
    """
    n, d = h.shape
    de = e.shape[1]
    if weight.shape[0] != 2 * d + de or attention.shape != (2 * d + de,):
        raise ShapeError(f"egat weights {weight.shape}/{attention.shape} do not match inputs (d={d}, de={de})")
    if e.shape[0] != src.size or src.size != dst.size:
        raise ShapeError("edge arrays have different lengths")
    if n and np.any(np.bincount(src, minlength=n) == 0):
        raise EmptyNeighborhoodError("every node needs at least one edge (its self-edge)")

    w_src, w_edge, w_dst = weight[:d], weight[d : d + de], weight[d + de :]
    a_src, a_edge, a_dst = attention[:d], attention[d : d + de], attention[d + de :]
    messages = (h @ w_src)[src] + e @ w_edge + (h @ w_dst)[dst]
    logits = (h @ a_src)[src] + e @ a_edge + (h @ a_dst)[dst]
    alpha = segment_softmax(leaky_relu(logits), src, n)
    aggregate = segment_sum(alpha[:, None] * messages, src, n)
    return EgatForward(messages=messages, logits=logits, attention=alpha, aggregate=aggregate, output=leaky_relu(aggregate))


def _check_same_shape(a: Var, b: Var, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


@dataclass
class Tape:
    """Records operations for reverse-mode differentiation.

    Attributes:
        params: Parameter variables requested from stores, by name
    """

    params: dict[str, Var] = field(default_factory=dict)
    _ops: list[tuple[Var, Callable[[np.ndarray], None]]] = field(default_factory=list)

    def _record(self, out: Var, inputs: Sequence[Var], backward: Callable[[np.ndarray], None]) -> Var:
        if any(var.requires_grad for var in inputs):
            out.requires_grad = True
            self._ops.append((out, backward))
        return out

    @staticmethod
    def _accumulate(var: Var, grad: np.ndarray) -> None:
        if var.requires_grad:
            var.grad = grad if var.grad is None else var.grad + grad

    def constant(self, value: np.ndarray) -> Var:
        """A value without gradient."""
        return Var(value)

    def variable(self, value: np.ndarray, name: str | None = None) -> Var:
        """A leaf value whose gradient is tracked."""
        return Var(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    def param(self, store: ParamStore, name: str) -> Var:
        """The tracked variable of a stored parameter (one per name per tape)."""
        var = self.params.get(name)
        if var is None:
            var = Var(store.value(name), requires_grad=True, name=name)
            self.params[name] = var
        return var

    def linear(self, x: Var, weight: Var, bias: Var | None = None) -> Var:
        """Affine map x @ weight + bias."""
        if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[0]:
            raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
        if bias is not None and bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape}")
        value = x.value @ weight.value
        if bias is not None:
            value = value + bias.value
        out = Var(value)

        def backward(g: np.ndarray) -> None:
            self._accumulate(x, g @ weight.value.T)
            self._accumulate(weight, x.value.T @ g)
            if bias is not None:
                self._accumulate(bias, g.sum(axis=0))

        return self._record(out, [x, weight] + ([bias] if bias is not None else []), backward)

    def leaky_relu(self, x: Var) -> Var:
        """Elementwise leaky rectifier (slope 0.01)."""
        out = Var(leaky_relu(x.value))

        def backward(g: np.ndarray) -> None:
            self._accumulate(x, g * leaky_relu_slope(x.value))

        return self._record(out, [x], backward)

    def add(self, a: Var, b: Var) -> Var:
        """Elementwise sum."""
        _check_same_shape(a, b, "add")
        out = Var(a.value + b.value)

        def backward(g: np.ndarray) -> None:
            self._accumulate(a, g)
            self._accumulate(b, g)

        return self._record(out, [a, b], backward)

    def sub(self, a: Var, b: Var) -> Var:
        """Elementwise difference."""
        _check_same_shape(a, b, "sub")
        out = Var(a.value - b.value)

        def backward(g: np.ndarray) -> None:
            self._accumulate(a, g)
            self._accumulate(b, -g)

        return self._record(out, [a, b], backward)

    def mul(self, a: Var, b: Var) -> Var:
        """Elementwise product."""
        _check_same_shape(a, b, "mul")
        out = Var(a.value * b.value)

        def backward(g: np.ndarray) -> None:
            self._accumulate(a, g * b.value)
            self._accumulate(b, g * a.value)

        return self._record(out, [a, b], backward)

    def scale(self, x: Var, factor: float) -> Var:
        """Multiply by a constant."""
        out = Var(x.value * factor)

        def backward(g: np.ndarray) -> None:
            self._accumulate(x, g * factor)

        return self._record(out, [x], backward)

    def exp(self, x: Var) -> Var:
        """Elementwise exponential."""
        out = Var(np.exp(x.value))

        def backward(g: np.ndarray) -> None:
            self._accumulate(x, g * out.value)

        return self._record(out, [x], backward)

    def clip(self, x: Var, low: float, high: float) -> Var:
        """Clip to [low, high]; no gradient flows where clipped."""
        out = Var(np.clip(x.value, low, high))

        def backward(g: np.ndarray) -> None:
            self._accumulate(x, g * ((x.value >= low) & (x.value <= high)))

        return self._record(out, [x], backward)

    def clamp_logvar(self, x: Var) -> Var:
        """Clip log-variances to [-LOGVAR_CLAMP, LOGVAR_CLAMP]."""
        return self.clip(x, -LOGVAR_CLAMP, LOGVAR_CLAMP)

    def concat(self, parts: Sequence[Var], axis: int = 1) -> Var:
        """Concatenate along an axis."""
        out = Var(np.concatenate([part.value for part in parts], axis=axis))
        bounds = np.cumsum([0] + [part.shape[axis] for part in parts])

        def backward(g: np.ndarray) -> None:
            for part, start, stop in zip(parts, bounds[:-1], bounds[1:]):
                self._accumulate(part, np.take(g, np.arange(start, stop), axis=axis))

        return self._record(out, list(parts), backward)

    def columns(self, x: Var, start: int, stop: int) -> Var:
        """Select a column range of a matrix."""
        out = Var(x.value[:, start:stop])

        def backward(g: np.ndarray) -> None:
            full = np.zeros_like(x.value)
            full[:, start:stop] = g
            self._accumulate(x, full)

        return self._record(out, [x], backward)

    def sum(self, x: Var) -> Var:
        """Sum of all elements (scalar)."""
        out = Var(np.asarray(x.value.sum()))

        def backward(g: np.ndarray) -> None:
            self._accumulate(x, np.full_like(x.value, float(g)))

        return self._record(out, [x], backward)

    def mean(self, x: Var) -> Var:
        """Mean of all elements (scalar); 0 for an empty array."""
        size = max(x.value.size, 1)
        return self.scale(self.sum(x), 1.0 / size)

    def egat(self, h: Var, e: Var, src: np.ndarray, dst: np.ndarray, weight: Var, attention: Var) -> Var:
        """Graph attention layer with edge features (see egat_forward)."""
        n, d = h.shape
        de = e.shape[1]
        fwd = egat_forward(h.value, e.value, src, dst, weight.value, attention.value)
        out = Var(fwd.output)

        def backward(g: np.ndarray) -> None:
            w_src, w_edge, w_dst = weight.value[:d], weight.value[d : d + de], weight.value[d + de :]
            a_src, a_edge, a_dst = attention.value[:d], attention.value[d : d + de], attention.value[d + de :]
            alpha = fwd.attention

            g_aggregate = g * leaky_relu_slope(fwd.aggregate)
            g_at_src = g_aggregate[src]
            g_messages = alpha[:, None] * g_at_src
            g_alpha = np.einsum("ij,ij->i", g_at_src, fwd.messages)
            g_scores = alpha * (g_alpha - segment_sum(alpha * g_alpha, src, n)[src])
            g_logits = g_scores * leaky_relu_slope(fwd.logits)

            g_p = segment_sum(g_messages, src, n)
            g_q = segment_sum(g_messages, dst, n)
            g_l = segment_sum(g_logits, src, n)
            g_r = segment_sum(g_logits, dst, n)

            self._accumulate(
                weight,
                np.concatenate((h.value.T @ g_p, e.value.T @ g_messages, h.value.T @ g_q), axis=0),
            )
            self._accumulate(
                attention,
                np.concatenate((h.value.T @ g_l, e.value.T @ g_logits, h.value.T @ g_r)),
            )
            self._accumulate(
                h,
                g_p @ w_src.T + g_q @ w_dst.T + np.outer(g_l, a_src) + np.outer(g_r, a_dst),
            )
            self._accumulate(e, g_messages @ w_edge.T + np.outer(g_logits, a_edge))

        return self._record(out, [h, e, weight, attention], backward)

    def gaussian_logpdf(self, x: Var, mu: Var, logvar: Var, mask: np.ndarray | None = None) -> Var:
        """Row-wise log-density of diagonal Gaussians.

        Args:
            x: Samples (n, k)
            mu: Means (n, k)
            logvar: Log-variances (n, k)
            mask: Optional (n, k) weights; masked entries contribute nothing

        Returns:
            Log-densities (n,)
        """
        _check_same_shape(x, mu, "gaussian_logpdf")
        _check_same_shape(mu, logvar, "gaussian_logpdf")
        weights = np.ones_like(mu.value) if mask is None else np.asarray(mask, dtype=np.float64)
        inv_var = np.exp(-logvar.value)
        diff = x.value - mu.value
        terms = -0.5 * (LOG_2PI + logvar.value + diff * diff * inv_var)
        out = Var((weights * terms).sum(axis=1))

        def backward(g: np.ndarray) -> None:
            scaled = g[:, None] * weights
            d_mu = scaled * diff * inv_var
            self._accumulate(mu, d_mu)
            self._accumulate(x, -d_mu)
            self._accumulate(logvar, -0.5 * scaled * (1.0 - diff * diff * inv_var))

        return self._record(out, [x, mu, logvar], backward)

    def kl_diag_normal(self, mu: Var, logvar: Var) -> Var:
        """Row-wise KL(N(mu, exp(logvar)) ‖ N(0, I)), shape (n,)."""
        _check_same_shape(mu, logvar, "kl_diag_normal")
        var = np.exp(logvar.value)
        out = Var(0.5 * (mu.value**2 + var - logvar.value - 1.0).sum(axis=1))

        def backward(g: np.ndarray) -> None:
            self._accumulate(mu, g[:, None] * mu.value)
            self._accumulate(logvar, 0.5 * g[:, None] * (var - 1.0))

        return self._record(out, [mu, logvar], backward)

    def reparameterize(self, mu: Var, logvar: Var, noise: np.ndarray) -> Var:
        """Sample mu + exp(logvar / 2) * noise."""
        _check_same_shape(mu, logvar, "reparameterize")
        if noise.shape != mu.shape:
            raise ShapeError(f"reparameterize: noise {noise.shape} does not match {mu.shape}")
        std = np.exp(0.5 * logvar.value)
        out = Var(mu.value + std * noise)

        def backward(g: np.ndarray) -> None:
            self._accumulate(mu, g)
            self._accumulate(logvar, 0.5 * g * std * noise)

        return self._record(out, [mu, logvar], backward)

    def backward(self, loss: Var) -> None:
        """Accumulate d(loss)/d(input) into every tracked variable.

        Raises:
            ShapeError: If loss is not a scalar
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for out, backward in reversed(self._ops):
            if out.grad is not None:
                backward(out.grad)
        self._ops.clear()

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradients of all parameters used on this tape (zero if unused by the loss)."""
        return {
            name: var.grad if var.grad is not None else np.zeros_like(var.value)
            for name, var in self.params.items()
        }


@dataclass
class _Slot:
    value: np.ndarray
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0


class ParamStore:
    """Named float64 parameters with Adam state.

    Shapes are fixed when a parameter is added.
    """

    def __init__(self) -> None:
        """Initialize an empty store."""
        self._slots: dict[str, _Slot] = {}

    def __contains__(self, name: object) -> bool:
        return name in self._slots

    def __len__(self) -> int:
        return len(self._slots)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._slots))

    def names(self, prefix: str = "") -> list[str]:
        """Sorted parameter names starting with a prefix."""
        return [name for name in sorted(self._slots) if name.startswith(prefix)]

    def add(
        self,
        name: str,
        shape: tuple[int, ...],
        rng: np.random.Generator | None = None,
        init: str = "glorot",
    ) -> np.ndarray:
        """Create a parameter.

        Args:
            name: Unique parameter name
            shape: Array shape
            rng: Generator for glorot initialization
            init: "glorot" (uniform in ±sqrt(6 / (fan_in + fan_out))) or "zeros"

        Returns:
            The initial value
        """
        if name in self._slots:
            raise ValueError(f"parameter {name} already exists")
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "glorot":
            if rng is None:
                raise ValueError("glorot initialization needs a generator")
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) > 1 else 1
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape)
        else:
            raise ValueError(f"unknown initialization {init!r}")
        self.set(name, value)
        return value

    def set(self, name: str, value: np.ndarray, first_moment: np.ndarray | None = None, second_moment: np.ndarray | None = None, step: int = 0) -> None:
        """Set a parameter and its optimizer state."""
        value = np.array(value, dtype=np.float64)
        existing = self._slots.get(name)
        if existing is not None and existing.value.shape != value.shape:
            raise ShapeError(f"parameter {name}: shape {value.shape} != {existing.value.shape}")
        self._slots[name] = _Slot(
            value=value,
            first_moment=np.zeros_like(value) if first_moment is None else np.array(first_moment, dtype=np.float64),
            second_moment=np.zeros_like(value) if second_moment is None else np.array(second_moment, dtype=np.float64),
            step=step,
        )

    def value(self, name: str) -> np.ndarray:
        """Current value of a parameter."""
        return self._slots[name].value

    def state(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
        """(value, first moment, second moment, step) of a parameter."""
        slot = self._slots[name]
        return slot.value, slot.first_moment, slot.second_moment, slot.step

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Shape of every parameter."""
        return {name: tuple(slot.value.shape) for name, slot in sorted(self._slots.items())}

    def copy(self) -> ParamStore:
        """Deep copy including optimizer state."""
        other = ParamStore()
        for name, slot in self._slots.items():
            other.set(name, slot.value.copy(), slot.first_moment.copy(), slot.second_moment.copy(), slot.step)
        return other

    def adam_step(
        self,
        grads: dict[str, np.ndarray],
        lr: float = DEFAULT_LEARNING_RATE,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        epsilon: float = ADAM_EPSILON,
    ) -> None:
        """Apply one Adam update with bias correction to the given parameters.

        Args:
            grads: Gradient per parameter name; others are left untouched
            lr: Learning rate
            beta1: First moment decay
            beta2: Second moment decay
            epsilon: Denominator offset
        """
        for name, grad in grads.items():
            slot = self._slots[name]
            if grad.shape != slot.value.shape:
                raise ShapeError(f"gradient of {name}: shape {grad.shape} != {slot.value.shape}")
            slot.step += 1
            slot.first_moment = beta1 * slot.first_moment + (1.0 - beta1) * grad
            slot.second_moment = beta2 * slot.second_moment + (1.0 - beta2) * grad * grad
            m_hat = slot.first_moment / (1.0 - beta1**slot.step)
            v_hat = slot.second_moment / (1.0 - beta2**slot.step)
            slot.value = slot.value - lr * m_hat / (np.sqrt(v_hat) + epsilon)


def init_dense(store: ParamStore, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator, zero: bool = False) -> None:
    """Add `prefix.weight` and `prefix.bias` of a dense layer."""
    store.add(f"{prefix}.weight", (fan_in, fan_out), rng, init="zeros" if zero else "glorot")
    store.add(f"{prefix}.bias", (fan_out,), init="zeros")


def init_egat(store: ParamStore, prefix: str, size: int, edge_size: int, rng: np.random.Generator) -> None:
    """Add `prefix.weight` and `prefix.attention` of a graph attention layer."""
    store.add(f"{prefix}.weight", (2 * size + edge_size, size), rng)
    store.add(f"{prefix}.attention", (2 * size + edge_size,), rng)


def init_graph_body(
    store: ParamStore,
    prefix: str,
    input_size: int,
    hidden_size: int,
    edge_size: int,
    layers: int,
    rng: np.random.Generator,
) -> None:
    """Add the parameters of an embedding layer followed by attention layers."""
    init_dense(store, f"{prefix}embed", input_size, hidden_size, rng)
    for layer in range(layers):
        init_egat(store, f"{prefix}egat{layer}", hidden_size, edge_size, rng)


def dense(tape: Tape, store: ParamStore, prefix: str, x: Var) -> Var:
    """Apply the dense layer stored under `prefix`."""
    return tape.linear(x, tape.param(store, f"{prefix}.weight"), tape.param(store, f"{prefix}.bias"))


def graph_body(
    tape: Tape,
    store: ParamStore,
    prefix: str,
    x: Var,
    edges: Var,
    src: np.ndarray,
    dst: np.ndarray,
    layers: int,
) -> Var:
    """Embed node inputs and run the attention layers stored under `prefix`."""
    h = tape.leaky_relu(dense(tape, store, f"{prefix}embed", x))
    for layer in range(layers):
        h = tape.egat(
            h,
            edges,
            src,
            dst,
            tape.param(store, f"{prefix}egat{layer}.weight"),
            tape.param(store, f"{prefix}egat{layer}.attention"),
        )
    return h
