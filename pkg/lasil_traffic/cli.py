"""Command line entry points.

Every subcommand reads a JSON run configuration (`--config`, optional) with
`--set key=value` overrides, logs to stderr and writes its results into the
output directory. Errors map to exit codes: 1 configuration, 2 data,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from .config import ABLATIONS, RunConfig, ablation, apply_overrides, describe_keys, load_config, save_config
from .const import EVAL_RUNS, EXIT_OK, PROFILE_STEPS, VERSION
from .evalmetrics import (
    REPORT_METRICS,
    EvalReport,
    evaluate,
    profile_runtime,
    road_deltas,
    road_means,
    summarize_runs,
    write_change_map,
    write_heatmaps,
    write_histograms,
    write_report,
)
from .exceptions import ConfigError, LasilError, NetworkFormatError
from .policy import PolicyModel
from .roadnet import Lane, RoadNetwork, edit_road, load_network, save_network
from .simengine import SimSettings, build_models, load_policy, simulate, train, write_metrics
from .streams import Purpose, derive_seed
from .trajdata import (
    TrajectoryDataset,
    apply_estimates,
    describe,
    estimate_traffic_lights,
    generate_synthetic_expert,
    load_demand,
    load_trace,
    load_trajectories,
    poisson_demand,
    save_demand,
    save_trajectories,
)

_LOGGER = logging.getLogger(__name__)

DEFAULT_PROFILE_SIZES = (10, 100, 1000)


def _require(value: str | None, key: str) -> str:
    if value is None:
        raise ConfigError(f"{key}: required for this command (set it in the config or with --set {key}=...)")
    return value


def _output_dir(config: RunConfig) -> Path:
    out = Path(_require(config.output_dir, "output_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_network(config: RunConfig) -> RoadNetwork:
    return load_network(_require(config.network, "network"))


def _load_dataset(config: RunConfig, network: RoadNetwork, path: str | None = None) -> TrajectoryDataset:
    source = path if path is not None else _require(config.trajectories, "trajectories")
    dataset = load_trajectories(source, network, config.dt, config.history_steps)
    _LOGGER.info("Dataset %s: %s", source, describe(dataset))
    return dataset


def _policy(config: RunConfig) -> tuple[PolicyModel, RunConfig]:
    return load_policy(_require(config.checkpoint, "checkpoint"), config)


def source_routes(network: RoadNetwork, max_roads: int = 32) -> list[tuple[str, ...]]:
    """Routes from every road nobody leads into, following first successors.

    On networks where every road has a predecessor (loops), every road is a
    start. A route stops at a dead end, a repeated road or `max_roads`.
    """
    targets = {successor for road in network.roads for successor in road.successors}
    starts = [road.id for road in network.roads if road.id not in targets] or [road.id for road in network.roads]
    routes = []
    for start in starts:
        route = [start]
        while len(route) < max_roads:
            successors = network.road(route[-1]).successors
            if not successors or successors[0] in route:
                break
            route.append(successors[0])
        routes.append(tuple(route))
    return routes


def start_step(dataset: TrajectoryDataset, steps: int, seed: int) -> int:
    """Pick a random recorded step with active agents and `steps` of recording ahead.

    Falls back to the first step with active agents on short recordings.
    """
    candidates = [
        step
        for step in range(dataset.first_step, max(dataset.last_step - steps, dataset.first_step) + 1)
        if dataset.active_at(step)
    ]
    if not candidates:
        return dataset.first_step
    rng = np.random.default_rng(derive_seed(seed, Purpose.ROLLOUT_START))
    return int(rng.choice(candidates))


def evaluate_policy(
    dataset: TrajectoryDataset,
    network: RoadNetwork,
    policy: PolicyModel,
    config: RunConfig,
    seed: int,
) -> EvalReport:
    """Simulate `eval_steps` from a random recorded step and score the result.

    The main run follows the configured sampling mode; minADE adds
    `min_ade_rollouts - 1` stochastic rollouts from the same start.
    """
    settings = SimSettings.from_config(config)
    first = start_step(dataset, config.eval_steps, seed)
    main = simulate(dataset, network, policy, settings, first, config.eval_steps, seed)
    stochastic = SimSettings.from_config(config.with_overrides(deterministic=False))
    rollouts = [
        simulate(dataset, network, policy, stochastic, first, config.eval_steps, derive_seed(seed, k)).trace
        for k in range(1, config.min_ade_rollouts)
    ]
    return evaluate(
        dataset,
        main.trace,
        network,
        rollouts,
        horizon=config.eval_steps + 1,
        start_step=first,
        threshold=config.offroad_threshold,
    )


def _handle_gen_synthetic(args: argparse.Namespace, config: RunConfig) -> int:
    """Generate IDM expert trajectories on a network.

    Args:
        args: Parsed arguments (demand, rate, horizon, speed_jitter)
        config: Run configuration

    Returns:
        Exit code
    """
    network = _load_network(config)
    out = _output_dir(config)
    if args.demand is not None:
        demand = load_demand(args.demand)
    else:
        demand = poisson_demand(source_routes(network), args.rate, args.horizon, config.seed)
    dataset = generate_synthetic_expert(
        network,
        demand,
        horizon=args.horizon,
        rng_seed=config.seed,
        dt=config.dt,
        speed_jitter=args.speed_jitter,
    )
    save_demand(demand, out / "demand.json")
    save_trajectories(dataset, out / "trajectories.csv")
    _LOGGER.info("Generated %d agents from %d demand entries", len(dataset), len(demand))
    return EXIT_OK


def _handle_estimate_lights(args: argparse.Namespace, config: RunConfig) -> int:
    """Estimate signal schedules and write them into a network file."""
    network = _load_network(config)
    dataset = _load_dataset(config, network)
    out = _output_dir(config)
    roads = args.roads or [signal.road_id for signal in network.signals]
    if not roads:
        raise ConfigError("no signaled roads: pass --roads or use a network with signals")

    estimates = estimate_traffic_lights(dataset, network, roads, config.workers)
    for estimate in estimates:
        if estimate.schedule is None:
            _LOGGER.warning("Road %s: no schedule found (%d onsets)", estimate.road_id, estimate.onset_count)
    rows = [
        {
            "road_id": e.road_id,
            "first_green": None if e.schedule is None else e.schedule.first_green,
            "green_time": None if e.schedule is None else e.schedule.green_time,
            "cycle": None if e.schedule is None else e.schedule.cycle,
            "cost": e.cost,
            "onset_count": e.onset_count,
        }
        for e in estimates
    ]
    pd.DataFrame(rows).to_csv(out / "lights.csv", index=False)
    save_network(apply_estimates(network, estimates), out / "network.json")
    return EXIT_OK


def _handle_train(args: argparse.Namespace, config: RunConfig) -> int:
    """Train the policy (and VAE) and write the checkpoint and loss curves."""
    network = _load_network(config)
    dataset = _load_dataset(config, network)
    out = _output_dir(config)
    save_config(config, out / "config.json")
    result = train(dataset, network, config, out)
    _LOGGER.info("Training finished: checkpoint %s", result.checkpoint)
    return EXIT_OK


def _handle_simulate(args: argparse.Namespace, config: RunConfig) -> int:
    """Run the trained policy closed-loop and write the trace and metrics."""
    network = _load_network(config)
    dataset = _load_dataset(config, network)
    policy, config = _policy(config)
    out = _output_dir(config)
    steps = config.eval_steps if args.steps is None else args.steps
    first = start_step(dataset, steps, config.seed) if args.start_step is None else args.start_step
    result = simulate(dataset, network, policy, SimSettings.from_config(config), first, steps, config.seed)
    save_trajectories(result.trace, out / "trace.csv")
    write_metrics(result.metrics, out / "metrics.jsonl")
    return EXIT_OK


def _handle_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    """Score simulated traces against a recording.

    The first `--sim` trace is the evaluated run; further traces only enter
    minADE.
    """
    network = _load_network(config)
    real = _load_dataset(config, network, args.real)
    sims = [load_trace(path, network, config.dt) for path in args.sim]
    out = _output_dir(config)
    report = evaluate(
        real,
        sims[0],
        network,
        sims[1:],
        horizon=args.horizon,
        start_step=args.start_step,
        threshold=config.offroad_threshold,
        squared_ade=args.squared,
    )
    write_report(report, out / "report.json")
    write_histograms(report.distributions, out)
    write_heatmaps(sims[0], network, out)
    return EXIT_OK


def _handle_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    """Train and evaluate every ablation row over seeded runs.

    Every row of a run shares the training seed and the evaluation start.
    """
    network = _load_network(config)
    dataset = _load_dataset(config, network)
    out = _output_dir(config)
    rows = args.rows or list(ABLATIONS)

    table: list[dict[str, Any]] = []
    summaries: dict[str, Any] = {}
    for name in rows:
        reports = []
        for run in range(args.runs):
            run_seed = derive_seed(config.seed, run)
            row_config = ablation(config, name).with_overrides(seed=run_seed, checkpoint=None)
            result = train(dataset, network, row_config)
            _, policy, _ = build_models(row_config, result.store)
            reports.append(evaluate_policy(dataset, network, policy, row_config, run_seed))
            _LOGGER.info("Ablation %s run %d: position RMSE %.3f", name, run, reports[-1].position_rmse)
        summary = summarize_runs(reports)
        summaries[name] = {"runs": [report.to_dict() for report in reports], "summary": summary}
        row: dict[str, Any] = {"method": name}
        for metric in REPORT_METRICS:
            row[f"{metric}_mean"] = summary[metric]["mean"]
            row[f"{metric}_std"] = summary[metric]["std"]
        table.append(row)

    pd.DataFrame(table).to_csv(out / "ablation.csv", index=False, float_format="%.10g")
    (out / "ablation.json").write_text(json.dumps(summaries, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def load_edits(path: str | Path) -> dict[str, list[Lane]]:
    """Load road edits: {"roads": [{"id": ..., "lanes": [{centerline, width}]}]}.

    Raises:
        NetworkFormatError: If the document is malformed
    """
    source = str(path)
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise NetworkFormatError(f"{source}: cannot read edits: {err}") from err
    except json.JSONDecodeError as err:
        raise NetworkFormatError(f"{source}:{err.lineno}:{err.colno}: {err.msg}") from err
    raw_roads = document.get("roads") if isinstance(document, dict) else None
    if not isinstance(raw_roads, list):
        raise NetworkFormatError(f"{source}: roads: expected a list")

    edits: dict[str, list[Lane]] = {}
    for i, raw in enumerate(raw_roads):
        where = f"{source}: roads[{i}]"
        if not isinstance(raw, dict) or "id" not in raw or not isinstance(raw.get("lanes"), list):
            raise NetworkFormatError(f"{where}: expected id and lanes")
        lanes = []
        for j, raw_lane in enumerate(raw["lanes"]):
            try:
                lanes.append(Lane(centerline=raw_lane["centerline"], width=raw_lane["width"]))
            except (KeyError, TypeError, ValueError) as err:
                raise NetworkFormatError(f"{where}.lanes[{j}]: {err}") from err
        edits[str(raw["id"])] = lanes
    return edits


def _handle_whatif(args: argparse.Namespace, config: RunConfig) -> int:
    """Simulate the same episode on the original and an edited network.

    Writes the edited network, per-road mean density and speed deltas and
    the change maps.
    """
    network = _load_network(config)
    dataset = _load_dataset(config, network)
    policy, config = _policy(config)
    out = _output_dir(config)

    edited = network
    for road_id, lanes in load_edits(args.edits).items():
        edited = edit_road(edited, road_id, lanes)
    save_network(edited, out / "network.json")

    settings = SimSettings.from_config(config)
    steps = config.eval_steps if args.steps is None else args.steps
    first = start_step(dataset, steps, config.seed)
    before = simulate(dataset, network, policy, settings, first, steps, config.seed)
    after = simulate(dataset, edited, policy, settings, first, steps, config.seed)
    deltas = road_deltas(road_means(before.trace, network), road_means(after.trace, edited))
    write_change_map(edited, deltas, out)
    return EXIT_OK


def _handle_profile(args: argparse.Namespace, config: RunConfig) -> int:
    """Measure per-step wall time at several world sizes.

    Without a checkpoint an untrained policy of the configured size is used.
    """
    network = _load_network(config)
    out = _output_dir(config)
    if config.checkpoint is not None:
        policy, config = _policy(config)
    else:
        _, policy, _ = build_models(config.with_overrides(augment=False))
    profile = profile_runtime(
        policy, network, args.sizes, SimSettings.from_config(config), args.steps, config.seed
    )
    profile.to_frame().to_csv(out / "profile.csv", index=False, float_format="%.10g")
    (out / "profile.json").write_text(
        json.dumps({"r_squared": profile.r_squared, "sizes": list(profile.sizes)}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    _LOGGER.info("Runtime profile: R² %s", profile.r_squared)
    return EXIT_OK


_HANDLERS: dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "gen-synthetic": _handle_gen_synthetic,
    "estimate-lights": _handle_estimate_lights,
    "train": _handle_train,
    "simulate": _handle_simulate,
    "evaluate": _handle_evaluate,
    "ablate": _handle_ablate,
    "whatif": _handle_whatif,
    "profile": _handle_profile,
}


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with one subparser per command."""
    epilog = "configuration keys (JSON file or --set key=value, with defaults):\n" + describe_keys()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key")
    common.add_argument("--output", help="output directory (overrides output_dir)")
    common.add_argument("--workers", type=int, help="worker threads (overrides workers)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="lasil-traffic",
        description="Learner-aware imitation learning traffic simulator",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, text: str) -> argparse.ArgumentParser:
        return commands.add_parser(
            name,
            parents=[common],
            help=text,
            description=text,
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )

    gen = add("gen-synthetic", "generate IDM expert trajectories")
    gen.add_argument("--demand", help="JSON spawn schedule; Poisson arrivals on source routes if omitted")
    gen.add_argument("--rate", type=float, default=0.1, help="arrivals per second and route (default 0.1)")
    gen.add_argument("--horizon", type=float, default=600.0, help="simulated seconds (default 600)")
    gen.add_argument("--speed-jitter", type=float, default=0.0, help="relative desired speed spread")

    lights = add("estimate-lights", "estimate fixed-time signal schedules")
    lights.add_argument("--roads", nargs="+", help="signaled roads (default: roads with signals)")

    add("train", "train the policy and the VAE")

    sim = add("simulate", "simulate the trained policy closed-loop")
    sim.add_argument("--start-step", type=int, help="recorded start step (default: random)")
    sim.add_argument("--steps", type=int, help="steps to simulate (default: eval_steps)")

    ev = add("evaluate", "score simulated traces against a recording")
    ev.add_argument("--real", required=True, help="recorded trajectory CSV")
    ev.add_argument("--sim", required=True, nargs="+", help="simulated trace CSVs; extra ones feed minADE")
    ev.add_argument("--start-step", type=int, help="first evaluated step")
    ev.add_argument("--horizon", type=int, help="evaluated steps")
    ev.add_argument("--squared", action="store_true", help="squared displacements in minADE")

    abl = add("ablate", "train and evaluate the ablation rows")
    abl.add_argument("--runs", type=int, default=EVAL_RUNS, help=f"seeded runs per row (default {EVAL_RUNS})")
    abl.add_argument("--rows", nargs="+", choices=list(ABLATIONS), metavar="ROW", help="subset of rows")

    what = add("whatif", "compare road density and speed after editing roads")
    what.add_argument("--edits", required=True, help="JSON road edits")
    what.add_argument("--steps", type=int, help="steps to simulate (default: eval_steps)")

    prof = add("profile", "time simulation steps by number of agents")
    prof.add_argument("--sizes", type=int, nargs="+", default=list(DEFAULT_PROFILE_SIZES), help="agent counts")
    prof.add_argument("--steps", type=int, default=PROFILE_STEPS, help=f"timed steps (default {PROFILE_STEPS})")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load the configuration and apply command line overrides."""
    config = apply_overrides(load_config(args.config), args.overrides)
    changes: dict[str, Any] = {}
    if args.output is not None:
        changes["output_dir"] = args.output
    if args.workers is not None:
        changes["workers"] = args.workers
    return config.with_overrides(**changes) if changes else config


def main(argv: Sequence[str] | None = None) -> int:
    """Run a subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args)
        return _HANDLERS[args.command](args, config)
    except LasilError as err:
        _LOGGER.error("%s", err)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
