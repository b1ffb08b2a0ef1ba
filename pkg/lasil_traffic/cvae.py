"""Context-conditioned VAE over past trajectories.

The encoder sees a node's past trajectory and context; the decoder sees
only the latent sample and the context. Trained jointly on expert graphs
and on graphs collected from the learner's own rollouts, the decoder
learns to reconstruct expert pasts the way the learner would have driven
them. Those reconstructions replace the expert past during policy
training.

With context conditioning disabled the decoder sees the latent sample
alone and reconstructs past and context together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .const import (
    DEFAULT_DECODER_LAYERS,
    DEFAULT_ENCODER_LAYERS,
    DEFAULT_HIDDEN_SIZE,
    DEFAULT_HISTORY_STEPS,
    DEFAULT_LATENT_DIM,
    DEFAULT_LEARNER_VAE_WEIGHT,
    DEFAULT_LEARNING_RATE,
    POSITION_SCALE,
)
from .diffcore import ParamStore, Tape, Var, dense, graph_body, init_dense, init_graph_body
from .graphstate import TrafficGraph, context_size
from .store import NAMESPACE_DECODER, NAMESPACE_ENCODER

_LOGGER = logging.getLogger(__name__)

EDGE_FEATURES = 2


@dataclass(frozen=True)
class VaeLosses:
    """Loss terms of one VAE step (means over nodes).

    Attributes:
        expert_recon: Expert reconstruction NLL
        expert_kl: Expert KL divergence
        learner_recon: Learner reconstruction NLL, None without a learner batch
        learner_kl: Learner KL divergence, None without a learner batch
        total: Expert terms plus weighted learner terms
    """

    expert_recon: float
    expert_kl: float
    learner_recon: float | None
    learner_kl: float | None
    total: float


class CvaeModel:
    """Encoder and decoder over traffic graphs.

    Attributes:
        store: Parameter store holding vae.encoder.* and vae.decoder.*
        hidden_size: Width of every hidden layer
        latent_dim: Latent size per node
        history_steps: Past positions per node (H)
        context_size: Context vector length (C)
        encoder_layers: Attention layers in the encoder
        decoder_layers: Attention layers in the decoder
        context_conditioned: Whether the decoder sees the context
    """

    def __init__(
        self,
        store: ParamStore,
        hidden_size: int = DEFAULT_HIDDEN_SIZE,
        latent_dim: int = DEFAULT_LATENT_DIM,
        history_steps: int = DEFAULT_HISTORY_STEPS,
        context_size: int = context_size(),
        encoder_layers: int = DEFAULT_ENCODER_LAYERS,
        decoder_layers: int = DEFAULT_DECODER_LAYERS,
        context_conditioned: bool = True,
        rng: np.random.Generator | None = None,
        zero_heads: bool = False,
    ) -> None:
        """Initialize the model, creating missing parameters.

        Args:
            store: Parameter store (shared with the policy)
            hidden_size: Width of every hidden layer
            latent_dim: Latent size per node
            history_steps: Past positions per node
            context_size: Context vector length
            encoder_layers: Attention layers in the encoder
            decoder_layers: Attention layers in the decoder
            context_conditioned: Whether the decoder sees the context
            rng: Generator for new parameters; required if the store lacks them
            zero_heads: Initialize output heads to zero
        """
        self.store = store
        self.hidden_size = hidden_size
        self.latent_dim = latent_dim
        self.history_steps = history_steps
        self.context_size = context_size
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.context_conditioned = context_conditioned

        if f"{NAMESPACE_ENCODER}embed.weight" not in store:
            if rng is None:
                raise ValueError("store has no VAE parameters and no generator was given")
            self._init_params(rng, zero_heads)

    @property
    def past_size(self) -> int:
        """Flattened past length (2H)."""
        return 2 * self.history_steps

    @property
    def target_size(self) -> int:
        """Length of the reconstructed vector."""
        return self.past_size if self.context_conditioned else self.past_size + self.context_size

    def _init_params(self, rng: np.random.Generator, zero_heads: bool) -> None:
        enc, dec = NAMESPACE_ENCODER, NAMESPACE_DECODER
        init_graph_body(
            self.store, enc, self.past_size + self.context_size, self.hidden_size, EDGE_FEATURES, self.encoder_layers, rng
        )
        init_dense(self.store, f"{enc}mu", self.hidden_size, self.latent_dim, rng, zero=zero_heads)
        init_dense(self.store, f"{enc}logvar", self.hidden_size, self.latent_dim, rng, zero=zero_heads)

        decoder_input = self.latent_dim + (self.context_size if self.context_conditioned else 0)
        init_graph_body(self.store, dec, decoder_input, self.hidden_size, EDGE_FEATURES, self.decoder_layers, rng)
        init_dense(self.store, f"{dec}mean", self.hidden_size, self.target_size, rng, zero=zero_heads)
        init_dense(self.store, f"{dec}logvar", self.hidden_size, self.target_size, rng, zero=zero_heads)
        _LOGGER.debug(
            "Initialized VAE: hidden %d, latent %d, %d parameters",
            self.hidden_size,
            self.latent_dim,
            len(self.store.names("vae.")),
        )

    def param_names(self) -> list[str]:
        """Names of all VAE parameters."""
        return self.store.names("vae.")

    def target(self, graph: TrafficGraph) -> np.ndarray:
        """Vector the decoder reconstructs for each node."""
        past = graph.past.reshape(graph.num_nodes, -1)
        if self.context_conditioned:
            return past
        return np.concatenate((past, graph.scaled_context()), axis=1)

    def _output_scale(self) -> np.ndarray:
        scale = np.ones(self.target_size)
        scale[: self.past_size] = POSITION_SCALE
        return scale

    def encode_vars(self, tape: Tape, graph: TrafficGraph) -> tuple[Var, Var]:
        """Encoder on a tape; returns (mu, logvar) per node."""
        x = tape.constant(graph.node_inputs())
        edges = tape.constant(graph.edge_inputs())
        h = graph_body(tape, self.store, NAMESPACE_ENCODER, x, edges, graph.edge_src, graph.edge_dst, self.encoder_layers)
        mu = dense(tape, self.store, f"{NAMESPACE_ENCODER}mu", h)
        logvar = tape.clamp_logvar(dense(tape, self.store, f"{NAMESPACE_ENCODER}logvar", h))
        return mu, logvar

    def decode_vars(self, tape: Tape, z: Var, graph: TrafficGraph) -> tuple[Var, Var]:
        """Decoder on a tape; returns (mean, logvar) of the target per node."""
        x = tape.concat([z, tape.constant(graph.scaled_context())]) if self.context_conditioned else z
        edges = tape.constant(graph.edge_inputs())
        h = graph_body(tape, self.store, NAMESPACE_DECODER, x, edges, graph.edge_src, graph.edge_dst, self.decoder_layers)
        raw_mean = dense(tape, self.store, f"{NAMESPACE_DECODER}mean", h)
        mean = tape.mul(raw_mean, tape.constant(np.broadcast_to(self._output_scale(), raw_mean.shape)))
        logvar = tape.clamp_logvar(dense(tape, self.store, f"{NAMESPACE_DECODER}logvar", h))
        return mean, logvar

    def encode(self, graph: TrafficGraph) -> tuple[np.ndarray, np.ndarray]:
        """Return (mu, logvar) per node, shape (n, latent_dim) each."""
        mu, logvar = self.encode_vars(Tape(), graph)
        return mu.value, logvar.value

    def decode(self, z: np.ndarray, graph: TrafficGraph) -> tuple[np.ndarray, np.ndarray]:
        """Return (mean, logvar) of the reconstructed target per node."""
        if z.shape != (graph.num_nodes, self.latent_dim):
            raise ValueError(f"z shape {z.shape} != {(graph.num_nodes, self.latent_dim)}")
        mean, logvar = self.decode_vars(Tape(), Var(z), graph)
        return mean.value, logvar.value

    def elbo_vars(self, tape: Tape, graph: TrafficGraph, noise: np.ndarray) -> tuple[Var, Var]:
        """Return (reconstruction NLL, KL), each averaged over nodes, on a tape."""
        mu, logvar = self.encode_vars(tape, graph)
        z = tape.reparameterize(mu, logvar, noise)
        mean, out_logvar = self.decode_vars(tape, z, graph)
        logpdf = tape.gaussian_logpdf(tape.constant(self.target(graph)), mean, out_logvar)
        recon = tape.scale(tape.mean(logpdf), -1.0)
        kl = tape.mean(tape.kl_diag_normal(mu, logvar))
        return recon, kl

    def sample_noise(self, graph: TrafficGraph, rng: np.random.Generator) -> np.ndarray:
        """Standard normal latent noise for every node."""
        return rng.standard_normal((graph.num_nodes, self.latent_dim))


def elbo_loss(model: CvaeModel, graph: TrafficGraph, rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> tuple[float, float]:
    """Evaluate the negative ELBO terms with one latent sample per node.

    Args:
        model: VAE
        graph: Graph with ground-truth past trajectories
        rng: Generator for the latent noise
        noise: Explicit latent noise, overriding rng

    Returns:
        Tuple of (reconstruction NLL, KL), each averaged over nodes
    """
    if noise is None:
        noise = model.sample_noise(graph, rng or np.random.default_rng())
    recon, kl = model.elbo_vars(Tape(), graph, noise)
    return float(recon.value), float(kl.value)


def vae_gradients(
    model: CvaeModel,
    expert: TrafficGraph,
    learner: TrafficGraph | None = None,
    lam: float = DEFAULT_LEARNER_VAE_WEIGHT,
    rng: np.random.Generator | None = None,
    expert_noise: np.ndarray | None = None,
    learner_noise: np.ndarray | None = None,
) -> tuple[dict[str, np.ndarray], VaeLosses]:
    """Gradients of expert loss + lam * learner loss w.r.t. all VAE parameters.

    Args:
        model: VAE
        expert: Expert graph
        learner: Graph from learner rollouts, None during warm-up
        lam: Weight of the learner term
        rng: Generator for latent noise not given explicitly
        expert_noise: Latent noise for the expert graph
        learner_noise: Latent noise for the learner graph

    Returns:
        Tuple of (gradients by parameter name, loss terms)
    """
    rng = rng or np.random.default_rng()
    tape = Tape()
    if expert_noise is None:
        expert_noise = model.sample_noise(expert, rng)
    expert_recon, expert_kl = model.elbo_vars(tape, expert, expert_noise)
    total = tape.add(expert_recon, expert_kl)

    learner_recon = learner_kl = None
    if learner is not None and learner.num_nodes and lam != 0.0:
        if learner_noise is None:
            learner_noise = model.sample_noise(learner, rng)
        learner_recon, learner_kl = model.elbo_vars(tape, learner, learner_noise)
        total = tape.add(total, tape.scale(tape.add(learner_recon, learner_kl), lam))

    tape.backward(total)
    grads = tape.gradients()
    for name in model.param_names():
        grads.setdefault(name, np.zeros_like(model.store.value(name)))
    losses = VaeLosses(
        expert_recon=float(expert_recon.value),
        expert_kl=float(expert_kl.value),
        learner_recon=None if learner_recon is None else float(learner_recon.value),
        learner_kl=None if learner_kl is None else float(learner_kl.value),
        total=float(total.value),
    )
    return grads, losses


def vae_train_step(
    model: CvaeModel,
    expert: TrafficGraph,
    learner: TrafficGraph | None = None,
    lam: float = DEFAULT_LEARNER_VAE_WEIGHT,
    rng: np.random.Generator | None = None,
    lr: float = DEFAULT_LEARNING_RATE,
) -> VaeLosses:
    """Take one Adam step on encoder and decoder.

    Args:
        model: VAE
        expert: Expert graph
        learner: Learner graph, None during warm-up
        lam: Weight of the learner term
        rng: Generator for latent noise
        lr: Learning rate

    Returns:
        Loss terms before the update
    """
    grads, losses = vae_gradients(model, expert, learner, lam, rng)
    model.store.adam_step(grads, lr)
    _LOGGER.debug(
        "VAE step: expert recon %.4f kl %.4f, learner recon %s kl %s",
        losses.expert_recon,
        losses.expert_kl,
        losses.learner_recon,
        losses.learner_kl,
    )
    return losses


def augment_expert(
    model: CvaeModel,
    graph: TrafficGraph,
    rng: np.random.Generator | None = None,
    sample_past: bool = False,
    noise: np.ndarray | None = None,
) -> TrafficGraph:
    """Replace every node's past trajectory with its VAE reconstruction.

    A latent is sampled from the encoder posterior and decoded; the decoded
    mean becomes the new past, or a sample from the decoded Gaussian when
    sample_past is set. Context, frames and edges are left untouched.

    Args:
        model: VAE
        graph: Expert graph
        rng: Generator for latent (and past) noise
        sample_past: Sample the past instead of taking the decoded mean
        noise: Explicit latent noise, overriding rng

    Returns:
        Graph with augmented past trajectories
    """
    if graph.num_nodes == 0:
        return graph
    rng = rng or np.random.default_rng()
    if noise is None:
        noise = model.sample_noise(graph, rng)
    tape = Tape()
    mu, logvar = model.encode_vars(tape, graph)
    z = tape.reparameterize(mu, logvar, noise)
    mean, out_logvar = model.decode_vars(tape, z, graph)
    past = mean.value[:, : model.past_size]
    if sample_past:
        std = np.exp(0.5 * out_logvar.value[:, : model.past_size])
        past = past + std * rng.standard_normal(past.shape)
    return graph.with_past(past.reshape(graph.past.shape))
