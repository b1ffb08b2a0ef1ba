"""Run configuration for the LASIL traffic simulator.

Configurations are JSON objects validated with voluptuous. Every key is
optional and defaults to the published hyper-parameter value; unknown keys
are rejected. Command-line overrides use `key=value` strings coerced by the
same schema.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Iterable

import voluptuous as vol

from .const import (
    CONF_ARRIVAL_RADIUS,
    CONF_ARRIVAL_TIMEOUT,
    CONF_AUGMENT,
    CONF_BATCH_SIZE,
    CONF_CHECKPOINT,
    CONF_CHECKPOINT_EVERY,
    CONF_CONTEXT_CONDITIONED,
    CONF_DECODER_LAYERS,
    CONF_DETERMINISTIC,
    CONF_DT,
    CONF_ENCODER_LAYERS,
    CONF_EVAL_STEPS,
    CONF_FUTURE_STEPS,
    CONF_HIDDEN_SIZE,
    CONF_HISTORY_STEPS,
    CONF_LATENT_DIM,
    CONF_LEARNER_VAE_WEIGHT,
    CONF_LEARNING_RATE,
    CONF_LQR,
    CONF_LQR_ACCEL_WEIGHT,
    CONF_MIN_ADE_ROLLOUTS,
    CONF_NEIGHBOR_COUNT,
    CONF_NEIGHBOR_MAX_DISTANCE,
    CONF_NETWORK,
    CONF_OFFROAD_THRESHOLD,
    CONF_ORIGIN_PERTURBATION_STD,
    CONF_OUTPUT_DIR,
    CONF_POLICY_LAYERS,
    CONF_PROJECTION,
    CONF_ROUTE_POINT_INTERVAL,
    CONF_ROUTE_POINTS,
    CONF_SAMPLE_AUGMENTED_PAST,
    CONF_SEED,
    CONF_SIM_INTERVAL,
    CONF_SIM_LENGTH,
    CONF_TRAIN_STEPS,
    CONF_TRAJECTORIES,
    CONF_WORKERS,
    DEFAULT_ARRIVAL_RADIUS,
    DEFAULT_ARRIVAL_TIMEOUT,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CHECKPOINT_EVERY,
    DEFAULT_DECODER_LAYERS,
    DEFAULT_DT,
    DEFAULT_ENCODER_LAYERS,
    DEFAULT_EVAL_STEPS,
    DEFAULT_FUTURE_STEPS,
    DEFAULT_HIDDEN_SIZE,
    DEFAULT_HISTORY_STEPS,
    DEFAULT_LATENT_DIM,
    DEFAULT_LEARNER_VAE_WEIGHT,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LQR_ACCEL_WEIGHT,
    DEFAULT_MIN_ADE_ROLLOUTS,
    DEFAULT_NEIGHBOR_COUNT,
    DEFAULT_NEIGHBOR_MAX_DISTANCE,
    DEFAULT_OFFROAD_THRESHOLD,
    DEFAULT_ORIGIN_PERTURBATION_STD,
    DEFAULT_POLICY_LAYERS,
    DEFAULT_ROUTE_POINT_INTERVAL,
    DEFAULT_ROUTE_POINTS,
    DEFAULT_SEED,
    DEFAULT_SIM_INTERVAL,
    DEFAULT_SIM_LENGTH,
    DEFAULT_TRAIN_STEPS,
    DEFAULT_WORKERS,
)
from .exceptions import ConfigError
from .graphstate import GraphConfig

_LOGGER = logging.getLogger(__name__)

_POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
_NON_NEGATIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=0))
_POSITIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))
_NON_NEGATIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0))
_OPTIONAL_PATH = vol.Any(None, vol.Coerce(str))


def _boolean(value: Any) -> bool:
    """Accept JSON booleans and the strings true/false/1/0/yes/no."""
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
    raise vol.Invalid(f"expected a boolean, got {value!r}")


# key: (validator, default, help text)
CONFIG_KEYS: dict[str, tuple[Any, Any, str]] = {
    CONF_NETWORK: (_OPTIONAL_PATH, None, "road network JSON file"),
    CONF_TRAJECTORIES: (_OPTIONAL_PATH, None, "trajectory CSV file"),
    CONF_CHECKPOINT: (_OPTIONAL_PATH, None, "parameter checkpoint file"),
    CONF_OUTPUT_DIR: (_OPTIONAL_PATH, None, "directory for outputs"),
    CONF_SEED: (vol.Coerce(int), DEFAULT_SEED, "run seed"),
    CONF_DT: (_POSITIVE_FLOAT, DEFAULT_DT, "simulation step (s)"),
    CONF_HISTORY_STEPS: (_POSITIVE_INT, DEFAULT_HISTORY_STEPS, "past positions per agent"),
    CONF_FUTURE_STEPS: (_POSITIVE_INT, DEFAULT_FUTURE_STEPS, "predicted future steps T"),
    CONF_ROUTE_POINTS: (_POSITIVE_INT, DEFAULT_ROUTE_POINTS, "route waypoints per agent"),
    CONF_ROUTE_POINT_INTERVAL: (_POSITIVE_FLOAT, DEFAULT_ROUTE_POINT_INTERVAL, "waypoint spacing (m)"),
    CONF_NEIGHBOR_COUNT: (_NON_NEGATIVE_INT, DEFAULT_NEIGHBOR_COUNT, "neighbors per agent K"),
    CONF_NEIGHBOR_MAX_DISTANCE: (_POSITIVE_FLOAT, DEFAULT_NEIGHBOR_MAX_DISTANCE, "neighbor radius (m)"),
    CONF_ORIGIN_PERTURBATION_STD: (
        _NON_NEGATIVE_FLOAT,
        DEFAULT_ORIGIN_PERTURBATION_STD,
        "local frame origin noise (m)",
    ),
    CONF_HIDDEN_SIZE: (_POSITIVE_INT, DEFAULT_HIDDEN_SIZE, "hidden layer width"),
    CONF_LATENT_DIM: (_POSITIVE_INT, DEFAULT_LATENT_DIM, "VAE latent size"),
    CONF_ENCODER_LAYERS: (_POSITIVE_INT, DEFAULT_ENCODER_LAYERS, "VAE encoder attention layers"),
    CONF_DECODER_LAYERS: (_POSITIVE_INT, DEFAULT_DECODER_LAYERS, "VAE decoder attention layers"),
    CONF_POLICY_LAYERS: (_POSITIVE_INT, DEFAULT_POLICY_LAYERS, "policy attention layers"),
    CONF_LQR_ACCEL_WEIGHT: (_POSITIVE_FLOAT, DEFAULT_LQR_ACCEL_WEIGHT, "LQR acceleration weight eta_a"),
    CONF_LEARNER_VAE_WEIGHT: (_NON_NEGATIVE_FLOAT, DEFAULT_LEARNER_VAE_WEIGHT, "learner VAE term weight lambda"),
    CONF_SIM_INTERVAL: (_NON_NEGATIVE_INT, DEFAULT_SIM_INTERVAL, "training steps between rollouts N, 0 disables"),
    CONF_SIM_LENGTH: (_NON_NEGATIVE_INT, DEFAULT_SIM_LENGTH, "rollout length S"),
    CONF_LEARNING_RATE: (_POSITIVE_FLOAT, DEFAULT_LEARNING_RATE, "Adam learning rate"),
    CONF_BATCH_SIZE: (_POSITIVE_INT, DEFAULT_BATCH_SIZE, "supervised agents per batch"),
    CONF_TRAIN_STEPS: (_NON_NEGATIVE_INT, DEFAULT_TRAIN_STEPS, "training steps"),
    CONF_CHECKPOINT_EVERY: (_NON_NEGATIVE_INT, DEFAULT_CHECKPOINT_EVERY, "steps between checkpoints, 0 for end only"),
    CONF_DETERMINISTIC: (_boolean, False, "use predicted means instead of samples"),
    CONF_AUGMENT: (_boolean, True, "learner-aware augmentation"),
    CONF_CONTEXT_CONDITIONED: (_boolean, True, "decoder conditioned on context"),
    CONF_PROJECTION: (_boolean, True, "on-road projection"),
    CONF_LQR: (_boolean, True, "LQR smoothing"),
    CONF_SAMPLE_AUGMENTED_PAST: (_boolean, False, "sample augmented pasts instead of decoded means"),
    CONF_OFFROAD_THRESHOLD: (_POSITIVE_FLOAT, DEFAULT_OFFROAD_THRESHOLD, "off-road distance (m)"),
    CONF_ARRIVAL_RADIUS: (_POSITIVE_FLOAT, DEFAULT_ARRIVAL_RADIUS, "removal radius at destination (m)"),
    CONF_ARRIVAL_TIMEOUT: (_NON_NEGATIVE_FLOAT, DEFAULT_ARRIVAL_TIMEOUT, "grace time after last record (s)"),
    CONF_MIN_ADE_ROLLOUTS: (_POSITIVE_INT, DEFAULT_MIN_ADE_ROLLOUTS, "rollouts per minADE"),
    CONF_EVAL_STEPS: (_POSITIVE_INT, DEFAULT_EVAL_STEPS, "evaluation horizon in steps"),
    CONF_WORKERS: (_POSITIVE_INT, DEFAULT_WORKERS, "worker threads"),
}

CONFIG_SCHEMA = vol.Schema(
    {vol.Optional(key, default=default): validator for key, (validator, default, _) in CONFIG_KEYS.items()},
    extra=vol.PREVENT_EXTRA,
)


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration (see CONFIG.md)."""

    network: str | None = None
    trajectories: str | None = None
    checkpoint: str | None = None
    output_dir: str | None = None
    seed: int = DEFAULT_SEED
    dt: float = DEFAULT_DT
    history_steps: int = DEFAULT_HISTORY_STEPS
    future_steps: int = DEFAULT_FUTURE_STEPS
    route_points: int = DEFAULT_ROUTE_POINTS
    route_point_interval: float = DEFAULT_ROUTE_POINT_INTERVAL
    neighbor_count: int = DEFAULT_NEIGHBOR_COUNT
    neighbor_max_distance: float = DEFAULT_NEIGHBOR_MAX_DISTANCE
    origin_perturbation_std: float = DEFAULT_ORIGIN_PERTURBATION_STD
    hidden_size: int = DEFAULT_HIDDEN_SIZE
    latent_dim: int = DEFAULT_LATENT_DIM
    encoder_layers: int = DEFAULT_ENCODER_LAYERS
    decoder_layers: int = DEFAULT_DECODER_LAYERS
    policy_layers: int = DEFAULT_POLICY_LAYERS
    lqr_accel_weight: float = DEFAULT_LQR_ACCEL_WEIGHT
    learner_vae_weight: float = DEFAULT_LEARNER_VAE_WEIGHT
    sim_interval: int = DEFAULT_SIM_INTERVAL
    sim_length: int = DEFAULT_SIM_LENGTH
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    train_steps: int = DEFAULT_TRAIN_STEPS
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY
    deterministic: bool = False
    augment: bool = True
    context_conditioned: bool = True
    projection: bool = True
    lqr: bool = True
    sample_augmented_past: bool = False
    offroad_threshold: float = DEFAULT_OFFROAD_THRESHOLD
    arrival_radius: float = DEFAULT_ARRIVAL_RADIUS
    arrival_timeout: float = DEFAULT_ARRIVAL_TIMEOUT
    min_ade_rollouts: int = DEFAULT_MIN_ADE_ROLLOUTS
    eval_steps: int = DEFAULT_EVAL_STEPS
    workers: int = DEFAULT_WORKERS

    @property
    def graph_config(self) -> GraphConfig:
        """Graph feature settings."""
        return GraphConfig(
            history_steps=self.history_steps,
            route_points=self.route_points,
            route_point_interval=self.route_point_interval,
            neighbor_count=self.neighbor_count,
            neighbor_max_distance=self.neighbor_max_distance,
            origin_perturbation_std=self.origin_perturbation_std,
        )

    def to_dict(self) -> dict[str, Any]:
        """Return the configuration as a JSON-compatible dict."""
        return asdict(self)

    def with_overrides(self, **changes: Any) -> RunConfig:
        """Return a validated copy with some keys changed."""
        return config_from_dict({**self.to_dict(), **changes})


def config_from_dict(data: Any, source: str = "<config>") -> RunConfig:
    """Validate a configuration mapping.

    Args:
        data: Parsed configuration object
        source: Name used in error messages

    Returns:
        The validated configuration

    Raises:
        ConfigError: If a key is unknown or a value is invalid
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: configuration must be a JSON object")
    try:
        validated = CONFIG_SCHEMA(data)
    except vol.MultipleInvalid as err:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in error.path) or '<root>'}: {error.msg}" for error in err.errors
        )
        raise ConfigError(f"{source}: {problems}") from err
    return RunConfig(**validated)


def load_config(path: str | Path | None) -> RunConfig:
    """Load a JSON configuration file; None gives the defaults.

    Raises:
        ConfigError: If the file is unreadable or invalid
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"{path}: cannot read configuration: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from err
    config = config_from_dict(data, str(path))
    _LOGGER.info("Loaded configuration %s", path)
    return config


def apply_overrides(config: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Apply `key=value` overrides; values are coerced by the schema.

    Raises:
        ConfigError: If an override is malformed or invalid
    """
    changes: dict[str, Any] = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected key=value")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"override {item!r}: unknown key {key}")
        changes[key] = None if value.strip().lower() in ("null", "none") and CONFIG_KEYS[key][1] is None else value
    if not changes:
        return config
    return config_from_dict({**config.to_dict(), **changes}, "--set")


def save_config(config: RunConfig, path: str | Path) -> None:
    """Write a configuration as sorted JSON."""
    Path(path).write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def describe_keys() -> str:
    """Return one line per key with its default, for --help."""
    lines = []
    for key, (_, default, text) in CONFIG_KEYS.items():
        lines.append(f"  {key:<26} {json.dumps(default):<10} {text}")
    return "\n".join(lines)


def ablation(config: RunConfig, name: str) -> RunConfig:
    """Return the configuration of an ablation row.

    Raises:
        ConfigError: If the name is unknown
    """
    changes = ABLATIONS.get(name)
    if changes is None:
        raise ConfigError(f"unknown ablation {name!r}")
    return replace(config, **changes)


# Row name: flag changes against the full method
ABLATIONS: dict[str, dict[str, Any]] = {
    "LASIL": {},
    "BC": {CONF_AUGMENT: False, CONF_PROJECTION: False, CONF_LQR: False, CONF_SIM_INTERVAL: 0},
    "w/o Augmentation": {CONF_AUGMENT: False},
    "w/o Context-conditioned": {CONF_CONTEXT_CONDITIONED: False},
    "w/o On-road Projection": {CONF_PROJECTION: False},
    "w/o LQR": {CONF_LQR: False},
}
