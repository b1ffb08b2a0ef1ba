"""Graph attention policy predicting Gaussian future trajectories."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .const import (
    DEFAULT_FUTURE_STEPS,
    DEFAULT_HIDDEN_SIZE,
    DEFAULT_HISTORY_STEPS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_POLICY_LAYERS,
    POSITION_SCALE,
)
from .diffcore import LOG_2PI, ParamStore, Tape, Var, dense, graph_body, init_dense, init_graph_body
from .graphstate import GraphSample, TrafficGraph, context_size
from .store import NAMESPACE_POLICY

_LOGGER = logging.getLogger(__name__)

EDGE_FEATURES = 2


@dataclass(frozen=True)
class GaussianTrajectoryPrediction:
    """Independent 2-D Gaussians per agent and future step, in local frames.

    Attributes:
        mean: Means, shape (n, T, 2)
        logvar: Log-variances of the diagonal covariances, shape (n, T, 2)
    """

    mean: np.ndarray
    logvar: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        """Diagonal variances, strictly positive."""
        return np.exp(self.logvar)

    @property
    def future_steps(self) -> int:
        """Number of predicted steps T."""
        return int(self.mean.shape[1])

    def sample(self, index: int, rng: np.random.Generator) -> np.ndarray:
        """Draw one future trajectory (T, 2) for a node."""
        noise = rng.standard_normal(self.mean[index].shape)
        return self.mean[index] + np.exp(0.5 * self.logvar[index]) * noise


class PolicyModel:
    """Maps a traffic graph to per-node future position distributions.

    Attributes:
        store: Parameter store holding policy.*
        hidden_size: Width of every hidden layer
        history_steps: Past positions per node
        context_size: Context vector length
        future_steps: Predicted steps T
        layers: Attention layers
    """

    def __init__(
        self,
        store: ParamStore,
        hidden_size: int = DEFAULT_HIDDEN_SIZE,
        history_steps: int = DEFAULT_HISTORY_STEPS,
        context_size: int = context_size(),
        future_steps: int = DEFAULT_FUTURE_STEPS,
        layers: int = DEFAULT_POLICY_LAYERS,
        rng: np.random.Generator | None = None,
        zero_head: bool = False,
    ) -> None:
        """Initialize the model, creating missing parameters.

        Args:
            store: Parameter store (shared with the VAE)
            hidden_size: Width of every hidden layer
            history_steps: Past positions per node
            context_size: Context vector length
            future_steps: Predicted steps T
            layers: Attention layers
            rng: Generator for new parameters; required if the store lacks them
            zero_head: Initialize the output head to zero
        """
        self.store = store
        self.hidden_size = hidden_size
        self.history_steps = history_steps
        self.context_size = context_size
        self.future_steps = future_steps
        self.layers = layers

        if f"{NAMESPACE_POLICY}embed.weight" not in store:
            if rng is None:
                raise ValueError("store has no policy parameters and no generator was given")
            init_graph_body(
                store, NAMESPACE_POLICY, 2 * history_steps + context_size, hidden_size, EDGE_FEATURES, layers, rng
            )
            init_dense(store, f"{NAMESPACE_POLICY}head", hidden_size, 4 * future_steps, rng, zero=zero_head)

    def param_names(self) -> list[str]:
        """Names of all policy parameters."""
        return self.store.names(NAMESPACE_POLICY)

    def predict_vars(self, tape: Tape, graph: TrafficGraph) -> tuple[Var, Var]:
        """Forward pass on a tape.

        Returns:
            Tuple of (mean, logvar), each (n, 2T) with step-major (x, y) pairs;
            means in meters, log-variances clamped
        """
        x = tape.constant(graph.node_inputs())
        edges = tape.constant(graph.edge_inputs())
        h = graph_body(tape, self.store, NAMESPACE_POLICY, x, edges, graph.edge_src, graph.edge_dst, self.layers)
        out = dense(tape, self.store, f"{NAMESPACE_POLICY}head", h)
        width = 2 * self.future_steps
        mean = tape.scale(tape.columns(out, 0, width), POSITION_SCALE)
        logvar = tape.clamp_logvar(tape.columns(out, width, 2 * width))
        return mean, logvar

    def predict(self, graph: TrafficGraph) -> GaussianTrajectoryPrediction:
        """Predict future position distributions for every node."""
        mean, logvar = self.predict_vars(Tape(), graph)
        shape = (graph.num_nodes, self.future_steps, 2)
        return GaussianTrajectoryPrediction(mean=mean.value.reshape(shape), logvar=logvar.value.reshape(shape))


def nll_loss(prediction: GaussianTrajectoryPrediction, futures: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Summed negative log-likelihood of true futures under the prediction.

    Args:
        prediction: Predicted distributions (n, T, 2)
        futures: True local-frame futures (n, T, 2)
        mask: Known steps (n, T); all steps if None

    Returns:
        Sum over unmasked (node, step) of the 2-D Gaussian NLL
    """
    if futures.shape != prediction.mean.shape:
        raise ValueError(f"futures shape {futures.shape} != {prediction.mean.shape}")
    weights = np.ones(futures.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
    diff = futures - prediction.mean
    terms = 0.5 * (LOG_2PI + prediction.logvar + diff * diff * np.exp(-prediction.logvar))
    return float((terms.sum(axis=2) * weights).sum())


def nll_vars(tape: Tape, model: PolicyModel, sample: GraphSample) -> Var:
    """Summed NLL of a sample on a tape."""
    mean, logvar = model.predict_vars(tape, sample.graph)
    n = sample.graph.num_nodes
    targets = tape.constant(sample.futures.reshape(n, -1))
    mask = np.repeat(sample.mask.astype(np.float64), 2, axis=1)
    return tape.scale(tape.sum(tape.gaussian_logpdf(targets, mean, logvar, mask)), -1.0)


def policy_gradients(model: PolicyModel, sample: GraphSample) -> tuple[dict[str, np.ndarray], float]:
    """Gradients of the summed NLL w.r.t. all policy parameters.

    Returns:
        Tuple of (gradients by parameter name, loss)
    """
    tape = Tape()
    loss = nll_vars(tape, model, sample)
    tape.backward(loss)
    grads = tape.gradients()
    for name in model.param_names():
        grads.setdefault(name, np.zeros_like(model.store.value(name)))
    return grads, float(loss.value)


def policy_train_step(model: PolicyModel, sample: GraphSample, lr: float = DEFAULT_LEARNING_RATE) -> float:
    """Take one Adam step minimizing the NLL of the sample's futures.

    The sample's graph is used as given; augmentation happens before.

    Returns:
        Loss before the update
    """
    grads, loss = policy_gradients(model, sample)
    model.store.adam_step(grads, lr)
    _LOGGER.debug("Policy step: nll %.4f over %d supervised nodes", loss, sample.supervised_nodes)
    return loss
