"""Tests for run configuration loading and overrides."""

from __future__ import annotations

import dataclasses
import json

import pytest

from lasil_traffic.config import (
    ABLATIONS,
    CONFIG_KEYS,
    RunConfig,
    ablation,
    apply_overrides,
    config_from_dict,
    describe_keys,
    load_config,
    save_config,
)
from lasil_traffic.exceptions import ConfigError


def test_every_key_is_a_field_with_matching_default() -> None:
    fields = {field.name: field.default for field in dataclasses.fields(RunConfig)}
    assert list(fields) == list(CONFIG_KEYS)
    for key, (_, default, _) in CONFIG_KEYS.items():
        assert fields[key] == default


def test_defaults() -> None:
    config = load_config(None)
    assert config == RunConfig()
    assert config.dt == 0.4
    assert config.history_steps == 10
    assert config.hidden_size == 512
    assert config.sim_interval == 50
    assert config.min_ade_rollouts == 20


def test_unknown_key_rejected() -> None:
    with pytest.raises(ConfigError, match="hiden_size"):
        config_from_dict({"hiden_size": 4})


def test_invalid_value_names_key() -> None:
    with pytest.raises(ConfigError, match="history_steps"):
        config_from_dict({"history_steps": 0})


def test_overrides_are_coerced() -> None:
    config = apply_overrides(RunConfig(), ["hidden_size=16", "lqr=false", "learning_rate=1e-2", "network=net.json"])
    assert config.hidden_size == 16
    assert config.lqr is False
    assert config.learning_rate == 0.01
    assert config.network == "net.json"


@pytest.mark.parametrize("item", ["hidden_size", "=3", "bogus=1", "augment=maybe"])
def test_bad_overrides(item: str) -> None:
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), [item])


def test_null_override_clears_path() -> None:
    config = apply_overrides(RunConfig(checkpoint="model.json"), ["checkpoint=null"])
    assert config.checkpoint is None


def test_save_and_load(tmp_path) -> None:  # noqa: ANN001
    path = tmp_path / "config.json"
    original = RunConfig(seed=3, hidden_size=32, augment=False)
    save_config(original, path)
    assert json.loads(path.read_text(encoding="utf-8"))["hidden_size"] == 32
    assert load_config(path) == original


def test_fixture_file(fixtures_dir) -> None:  # noqa: ANN001
    config = load_config(fixtures_dir / "small_config.json")
    assert config.train_steps == 3
    assert config.eval_steps == 5


def test_syntax_error_location(tmp_path) -> None:  # noqa: ANN001
    path = tmp_path / "config.json"
    path.write_text('{\n "seed": }', encoding="utf-8")
    with pytest.raises(ConfigError, match=r"config.json:2:\d+"):
        load_config(path)


def test_ablation_rows() -> None:
    assert list(ABLATIONS) == [
        "LASIL",
        "BC",
        "w/o Augmentation",
        "w/o Context-conditioned",
        "w/o On-road Projection",
        "w/o LQR",
    ]
    base = RunConfig(seed=4)
    assert ablation(base, "LASIL") == base
    bc = ablation(base, "BC")
    assert (bc.augment, bc.projection, bc.lqr, bc.sim_interval) == (False, False, False, 0)
    assert ablation(base, "w/o LQR").lqr is False
    assert ablation(base, "w/o Context-conditioned").context_conditioned is False
    with pytest.raises(ConfigError):
        ablation(base, "w/o Everything")


def test_describe_keys_lists_every_key() -> None:
    text = describe_keys()
    for key in CONFIG_KEYS:
        assert key in text


def test_graph_config_follows_run_config() -> None:
    graph = RunConfig(history_steps=4, route_points=3, neighbor_count=2).graph_config
    assert (graph.history_steps, graph.route_points, graph.neighbor_count) == (4, 3, 2)
