"""Tests for the context-conditioned VAE and expert augmentation."""

from __future__ import annotations

import numpy as np
import pytest

from lasil_traffic.cvae import CvaeModel, augment_expert, elbo_loss, vae_gradients, vae_train_step
from lasil_traffic.diffcore import LOG_2PI, ParamStore
from lasil_traffic.store import NAMESPACE_ENCODER

from .conftest import make_graph

HISTORY = 3
CONTEXT = 5
LATENT = 2


def build_model(zero_heads: bool = False, context_conditioned: bool = True, seed: int = 0) -> CvaeModel:
    return CvaeModel(
        ParamStore(),
        hidden_size=8,
        latent_dim=LATENT,
        history_steps=HISTORY,
        context_size=CONTEXT,
        context_conditioned=context_conditioned,
        rng=np.random.default_rng(seed),
        zero_heads=zero_heads,
    )


def test_zero_heads_give_standard_normal_posterior() -> None:
    model = build_model(zero_heads=True)
    graph = make_graph(np.zeros((4, HISTORY, 2)), CONTEXT)
    recon, kl = elbo_loss(model, graph, noise=np.zeros((4, LATENT)))
    assert kl == pytest.approx(0.0)
    # Mean 0 and unit variance on a zero past
    assert recon == pytest.approx(HISTORY * LOG_2PI)


def test_encode_shapes_and_unit_mean() -> None:
    model = build_model(zero_heads=True)
    model.store.set(f"{NAMESPACE_ENCODER}mu.bias", np.ones(LATENT))
    mu, logvar = model.encode(make_graph(np.zeros((3, HISTORY, 2)), CONTEXT))
    assert mu.shape == (3, LATENT)
    assert logvar.shape == (3, LATENT)
    assert np.allclose(mu, 1.0)
    assert np.allclose(logvar, 0.0)


def test_kl_of_unit_mean() -> None:
    model = build_model(zero_heads=True)
    model.store.set(f"{NAMESPACE_ENCODER}mu.bias", np.ones(LATENT))
    graph = make_graph(np.zeros((3, HISTORY, 2)), CONTEXT)
    _, kl = elbo_loss(model, graph, noise=np.zeros((3, LATENT)))
    assert kl == pytest.approx(0.5 * LATENT)


def test_reconstruction_grows_with_past_error() -> None:
    model = build_model(zero_heads=True)
    past = np.zeros((2, HISTORY, 2))
    past[:, :, 0] = 1.0
    recon, _ = elbo_loss(model, make_graph(past, CONTEXT), noise=np.zeros((2, LATENT)))
    assert recon == pytest.approx(HISTORY * LOG_2PI + 0.5 * HISTORY)


def test_zero_learner_weight_matches_expert_only() -> None:
    model = build_model()
    expert = make_graph(np.random.default_rng(1).normal(size=(3, HISTORY, 2)), CONTEXT, seed=1)
    learner = make_graph(np.random.default_rng(2).normal(size=(4, HISTORY, 2)), CONTEXT, seed=2)
    noise = np.random.default_rng(3).standard_normal((3, LATENT))

    alone, alone_losses = vae_gradients(model, expert, None, expert_noise=noise)
    weighted, weighted_losses = vae_gradients(model, expert, learner, lam=0.0, expert_noise=noise)
    assert weighted_losses.learner_recon is None
    assert weighted_losses.total == pytest.approx(alone_losses.total)
    for name, grad in alone.items():
        np.testing.assert_allclose(weighted[name], grad)


def test_learner_term_is_weighted() -> None:
    model = build_model()
    expert = make_graph(np.random.default_rng(1).normal(size=(3, HISTORY, 2)), CONTEXT, seed=1)
    learner = make_graph(np.random.default_rng(2).normal(size=(2, HISTORY, 2)), CONTEXT, seed=2)
    expert_noise = np.random.default_rng(3).standard_normal((3, LATENT))
    learner_noise = np.random.default_rng(4).standard_normal((2, LATENT))

    expert_grads, _ = vae_gradients(model, expert, expert_noise=expert_noise)
    learner_grads, _ = vae_gradients(model, learner, expert_noise=learner_noise)
    joint, losses = vae_gradients(
        model, expert, learner, lam=2.0, expert_noise=expert_noise, learner_noise=learner_noise
    )
    assert losses.learner_kl is not None
    for name in model.param_names():
        np.testing.assert_allclose(joint[name], expert_grads[name] + 2.0 * learner_grads[name], atol=1e-10)


def test_training_reduces_loss() -> None:
    model = build_model(seed=5)
    graph = make_graph(np.random.default_rng(6).normal(size=(4, HISTORY, 2)), CONTEXT, seed=6)
    noise = np.zeros((4, LATENT))
    before = sum(elbo_loss(model, graph, noise=noise))
    rng = np.random.default_rng(0)
    for _ in range(40):
        vae_train_step(model, graph, rng=rng, lr=1e-2)
    assert sum(elbo_loss(model, graph, noise=noise)) < before


def test_augmentation_only_replaces_past() -> None:
    model = build_model()
    graph = make_graph(np.random.default_rng(1).normal(size=(3, HISTORY, 2)), CONTEXT)
    augmented = augment_expert(model, graph, np.random.default_rng(0))
    assert augmented.past.shape == graph.past.shape
    assert not np.allclose(augmented.past, graph.past)
    assert augmented.context is graph.context
    assert augmented.origins is graph.origins
    assert augmented.edge_src is graph.edge_src
    assert augmented.edge_feat is graph.edge_feat


def test_augmentation_is_seeded() -> None:
    model = build_model()
    graph = make_graph(np.random.default_rng(1).normal(size=(3, HISTORY, 2)), CONTEXT)
    first = augment_expert(model, graph, np.random.default_rng(9), sample_past=True)
    second = augment_expert(model, graph, np.random.default_rng(9), sample_past=True)
    np.testing.assert_array_equal(first.past, second.past)


def test_unconditioned_decoder_reconstructs_context() -> None:
    model = build_model(context_conditioned=False)
    graph = make_graph(np.zeros((2, HISTORY, 2)), CONTEXT)
    assert model.target_size == 2 * HISTORY + CONTEXT
    assert model.target(graph).shape == (2, 2 * HISTORY + CONTEXT)
    mean, _ = model.decode(np.zeros((2, LATENT)), graph)
    assert mean.shape == (2, 2 * HISTORY + CONTEXT)


def test_decode_checks_latent_shape() -> None:
    model = build_model()
    with pytest.raises(ValueError):
        model.decode(np.zeros((2, LATENT + 1)), make_graph(np.zeros((2, HISTORY, 2)), CONTEXT))


def test_missing_parameters_need_generator() -> None:
    with pytest.raises(ValueError):
        CvaeModel(ParamStore(), hidden_size=4, history_steps=HISTORY, context_size=CONTEXT)
