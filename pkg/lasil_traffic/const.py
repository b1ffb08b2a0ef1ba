"""Constants for the LASIL traffic simulator."""

from typing import Final

# Version - keep in sync with pyproject.toml
VERSION: Final = "0.1.0"

# Package name used for logger and file format tags
DOMAIN: Final = "lasil_traffic"

# Vehicle categories (order defines the one-hot encoding)
VEHICLE_TYPES: Final = ("motorcycle", "car", "taxi", "bus", "medium", "heavy")

# Configuration keys - Paths
CONF_NETWORK: Final = "network"
CONF_TRAJECTORIES: Final = "trajectories"
CONF_CHECKPOINT: Final = "checkpoint"
CONF_OUTPUT_DIR: Final = "output_dir"

# Configuration keys - State representation
CONF_SEED: Final = "seed"
CONF_DT: Final = "dt"
CONF_HISTORY_STEPS: Final = "history_steps"
CONF_FUTURE_STEPS: Final = "future_steps"
CONF_ROUTE_POINTS: Final = "route_points"
CONF_ROUTE_POINT_INTERVAL: Final = "route_point_interval"
CONF_NEIGHBOR_COUNT: Final = "neighbor_count"
CONF_NEIGHBOR_MAX_DISTANCE: Final = "neighbor_max_distance"
CONF_ORIGIN_PERTURBATION_STD: Final = "origin_perturbation_std"

# Configuration keys - Networks
CONF_HIDDEN_SIZE: Final = "hidden_size"
CONF_LATENT_DIM: Final = "latent_dim"
CONF_ENCODER_LAYERS: Final = "encoder_layers"
CONF_DECODER_LAYERS: Final = "decoder_layers"
CONF_POLICY_LAYERS: Final = "policy_layers"

# Configuration keys - Training
CONF_LQR_ACCEL_WEIGHT: Final = "lqr_accel_weight"
CONF_LEARNER_VAE_WEIGHT: Final = "learner_vae_weight"
CONF_SIM_INTERVAL: Final = "sim_interval"
CONF_SIM_LENGTH: Final = "sim_length"
CONF_LEARNING_RATE: Final = "learning_rate"
CONF_BATCH_SIZE: Final = "batch_size"
CONF_TRAIN_STEPS: Final = "train_steps"
CONF_CHECKPOINT_EVERY: Final = "checkpoint_every"

# Configuration keys - Mode flags
CONF_DETERMINISTIC: Final = "deterministic"
CONF_AUGMENT: Final = "augment"
CONF_CONTEXT_CONDITIONED: Final = "context_conditioned"
CONF_PROJECTION: Final = "projection"
CONF_LQR: Final = "lqr"
CONF_SAMPLE_AUGMENTED_PAST: Final = "sample_augmented_past"

# Configuration keys - Simulation and evaluation
CONF_OFFROAD_THRESHOLD: Final = "offroad_threshold"
CONF_ARRIVAL_RADIUS: Final = "arrival_radius"
CONF_ARRIVAL_TIMEOUT: Final = "arrival_timeout"
CONF_MIN_ADE_ROLLOUTS: Final = "min_ade_rollouts"
CONF_EVAL_STEPS: Final = "eval_steps"
CONF_WORKERS: Final = "workers"

# Default values - State representation
DEFAULT_SEED: Final = 0
DEFAULT_DT: Final = 0.4  # Simulation time step (s)
DEFAULT_HISTORY_STEPS: Final = 10  # Past positions per node
DEFAULT_FUTURE_STEPS: Final = 10  # Predicted positions per node (T)
DEFAULT_ROUTE_POINTS: Final = 30  # Route waypoints per node
DEFAULT_ROUTE_POINT_INTERVAL: Final = 5.0  # Waypoint spacing (m)
DEFAULT_NEIGHBOR_COUNT: Final = 6  # Out-neighbors per node (K)
DEFAULT_NEIGHBOR_MAX_DISTANCE: Final = 20.0  # Neighbor radius (m)
DEFAULT_ORIGIN_PERTURBATION_STD: Final = 2.0  # Local frame origin noise (m)

# Default values - Networks
DEFAULT_HIDDEN_SIZE: Final = 512
DEFAULT_LATENT_DIM: Final = 8
DEFAULT_ENCODER_LAYERS: Final = 1
DEFAULT_DECODER_LAYERS: Final = 1
DEFAULT_POLICY_LAYERS: Final = 1

# Default values - Training
DEFAULT_LQR_ACCEL_WEIGHT: Final = 1.0  # eta_a
DEFAULT_LEARNER_VAE_WEIGHT: Final = 1.0  # lambda
DEFAULT_SIM_INTERVAL: Final = 50  # Training steps between rollouts (N)
DEFAULT_SIM_LENGTH: Final = 50  # Rollout length in sim steps (S)
DEFAULT_LEARNING_RATE: Final = 3e-4
DEFAULT_BATCH_SIZE: Final = 32  # Minimum supervised nodes per batch
DEFAULT_TRAIN_STEPS: Final = 20000
DEFAULT_CHECKPOINT_EVERY: Final = 1000

# Default values - Simulation and evaluation
DEFAULT_OFFROAD_THRESHOLD: Final = 1.5  # Off-road distance (m), strict >
DEFAULT_ARRIVAL_RADIUS: Final = 5.0  # Removal radius around final position (m)
DEFAULT_ARRIVAL_TIMEOUT: Final = 60.0  # Grace time after last record (s)
DEFAULT_MIN_ADE_ROLLOUTS: Final = 20
DEFAULT_EVAL_STEPS: Final = 50  # Short-term horizon, 20 s at 0.4 s
DEFAULT_WORKERS: Final = 1

# Adam
ADAM_BETA1: Final = 0.9
ADAM_BETA2: Final = 0.999
ADAM_EPSILON: Final = 1e-8

# Network numerics
LEAKY_RELU_SLOPE: Final = 0.01
LOGVAR_CLAMP: Final = 10.0  # Log-variances are clipped to [-10, 10]
POSITION_SCALE: Final = 10.0  # Meters per unit of network input/output
DESTINATION_SCALE: Final = 100.0
WIDTH_SCALE: Final = 3.5

# Road network
GRID_CELL_SIZE: Final = 20.0  # Spatial index cell (m)
NETWORK_FORMAT_VERSION: Final = 1

# Route inference
ROUTE_START_MAX_DISTANCE: Final = 50.0  # First position must be this close (m)
ROUTE_MAX_DEVIATION: Final = 20.0  # Candidate roads farther are never inserted (m)

# Traffic light estimation
SIGNAL_CYCLES: Final = (45.0, 90.0)  # Allowed cycle lengths (s)
STOP_SPEED_THRESHOLD: Final = 0.5  # Stop/start crossing speed (m/s)
STOP_LINE_RADIUS: Final = 30.0  # Events must lie this close to the stop line (m)
ONSET_MIN_GAP: Final = 7.0  # Gap to previous event marking a phase onset (s)
ONSET_MATCH_TOLERANCE: Final = 2.0  # Event/onset match window (s)
OFFSET_RESOLUTION: Final = 0.01  # First-green enumeration step (s)
MIN_ONSET_EVENTS: Final = 3  # Below this a schedule is unestimated

# IDM defaults per vehicle type (SUMO baseline table)
IDM_DESIRED_SPEED: Final = {
    "motorcycle": 30.0,
    "car": 30.0,
    "taxi": 30.0,
    "bus": 11.70,
    "medium": 30.0,
    "heavy": 17.38,
}
IDM_MAX_ACCEL: Final = 2.5  # m/s²
IDM_COMFORT_DECEL: Final = 10.0  # m/s²
IDM_MIN_GAP: Final = 0.1  # m
IDM_TIME_HEADWAY: Final = 0.1  # s
IDM_DELTA: Final = 4.0  # Free-road acceleration exponent

# Vehicle lengths for bumper-to-bumper gaps (m)
VEHICLE_LENGTH: Final = {
    "motorcycle": 2.0,
    "car": 4.5,
    "taxi": 4.5,
    "bus": 12.0,
    "medium": 7.0,
    "heavy": 12.0,
}

# Evaluation
SPEED_BIN_WIDTH: Final = 0.5  # m/s
LEADER_BIN_WIDTH: Final = 1.0  # m
LEADER_DISTANCE_CAP: Final = 100.0  # m
PROFILE_STEPS: Final = 50  # Timed steps per world size
EVAL_RUNS: Final = 5  # Seeded runs per ablation row

# Exit codes
EXIT_OK: Final = 0
EXIT_CONFIG_ERROR: Final = 1
EXIT_DATA_ERROR: Final = 2
EXIT_NUMERICAL_ERROR: Final = 3

# Checkpoint storage
CHECKPOINT_FORMAT: Final = "lasil_traffic.params"
CHECKPOINT_VERSION: Final = 1
