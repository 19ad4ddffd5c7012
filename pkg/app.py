import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace

from dotenv import load_dotenv

# Import custom modules
from database.db_handler import DatabaseHandler
from database.formats import (
    dumps_instance,
    episode_record,
    load_commands,
    load_instance,
    load_malfunctions,
    load_plan,
    save_commands,
    save_malfunctions,
    save_plan,
    save_report,
    save_trace,
    save_trajectory,
)
from engine.simulator import Command, ReplayController, render_frame, run_episode
from errors import InstanceFormatError, PlanMismatchError, RailPlanError
from execution.bench import load_suite, parse_strategies, run_suite, solve_instance
from execution.executor import ReplanConfig, ReplanMode, run_controller
from models.analytics import AnalyticsManager
from models.scenario import GeneratorConfig, MalfunctionParams, generate_instance, level_preset, sample_malfunctions
from planning.planner import DEFAULT_PORTFOLIO, Solution, validate_solution
from settings import get_settings

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

GENERATOR_FIELDS = ("width", "height", "n_cities", "n_agents", "slack_factor", "departure_spread", "city_length", "jitter")


def _read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise InstanceFormatError(f"{path}: line {e.lineno}: {e.msg}") from e


def _malfunction_params(doc):
    settings = get_settings()
    return MalfunctionParams(
        rate=float(doc.get("lambda", 0.002)),
        min_duration=int(doc.get("min", settings.malfunction_min)),
        max_duration=int(doc.get("max", settings.malfunction_max)),
    )


def generator_configs(doc):
    """
    Expand a generation config document into named generator configs.

    Presets are listed by level under `levels`; fully custom maps go under
    `generators`, one object per config with a `name` and the
    `GeneratorConfig` fields.

    Returns:
        list: (file prefix, GeneratorConfig) pairs
    """
    if not isinstance(doc, dict):
        raise InstanceFormatError("config: expected an object")
    malfunction = _malfunction_params(doc["malfunction"]) if isinstance(doc.get("malfunction"), dict) else None

    configs = []
    for level in doc.get("levels", []):
        if isinstance(level, bool) or not isinstance(level, int):
            raise InstanceFormatError(f"levels: expected integers, got {level!r}")
        configs.append((f"level{level:02d}", level_preset(level, malfunction)))

    for index, item in enumerate(doc.get("generators", [])):
        where = f"generators[{index}]"
        if not isinstance(item, dict) or not isinstance(item.get("name"), str):
            raise InstanceFormatError(f"{where}.name: missing field")
        fields = {key: item[key] for key in GENERATOR_FIELDS if key in item}
        if "speed_mix" in item:
            fields["speed_mix"] = tuple((int(speed), float(share)) for speed, share in item["speed_mix"].items())
        if malfunction is not None or "malfunction" in item:
            fields["malfunction"] = _malfunction_params(item.get("malfunction", doc.get("malfunction", {})))
        try:
            configs.append((item["name"], GeneratorConfig(**fields)))
        except TypeError as e:
            raise InstanceFormatError(f"{where}: {e}") from None

    if not configs:
        raise InstanceFormatError("config: needs `levels` or `generators`")
    return configs


def cmd_gen(args):
    """Write one instance file per (config, index, seed), plus an optional malfunction sidecar."""
    doc = _read_json(args.config)
    count = int(doc.get("count", 1))
    os.makedirs(args.out, exist_ok=True)

    written = 0
    for prefix, config in generator_configs(doc):
        for index in range(count):
            seed = args.seed + index
            instance = generate_instance(config, seed)
            if config.level is None:
                instance = replace(instance, name=f"{prefix}-seed{seed}")
            path = os.path.join(args.out, f"{prefix}-{index:03d}-seed{seed}.json")
            with open(path, "w", encoding="utf-8") as f:
                f.write(dumps_instance(instance))
            logger.info("Generated %s: %dx%d, %d trains, tmax %d", path, config.width, config.height, config.n_agents, instance.tmax)
            if args.malfunctions:
                agents = len(instance.trains)
                schedule = sample_malfunctions(instance.malfunction, agents, instance.tmax, seed)
                save_malfunctions(schedule, path[: -len(".json")] + ".malfunctions.txt")
            written += 1

    logger.info("%d instance files written to %s", written, args.out)
    return 0


def cmd_solve(args):
    """Plan an instance and write the plan file."""
    instance = load_instance(args.instance)
    strategies = parse_strategies(args.portfolio.split(",")) if args.portfolio else DEFAULT_PORTFOLIO
    outcome = solve_instance(instance, strategies, args.lns_iters, args.budget_ms, args.seed)

    problems = validate_solution(outcome.solution)
    if problems:
        for problem in problems:
            logger.error("Invalid plan: %s", problem)
        return 1

    label = outcome.solution.label + ("+budget" if outcome.budget_hit else "")
    save_plan(instance, outcome.solution.paths, args.out, label)
    if args.trace:
        save_trace(outcome.trace, args.trace)

    print(json.dumps(outcome.metrics()))
    return 0


def _episode_observer(agents, rows, frames):
    """Collect the command rows issued and, when `frames` is an open file, dump each state."""

    def observe(state, commands):
        rows[state.t] = [commands.get(agent, Command.STOP) for agent in range(agents)]
        if frames is not None:
            frames.write(render_frame(state) + "\n")

    return observe


def cmd_simulate(args):
    """Execute a plan (or a command file) and report the episode."""
    instance = load_instance(args.instance)
    agents = len(instance.trains)
    if args.malfunctions:
        schedule = load_malfunctions(args.malfunctions, agents)
    else:
        schedule = sample_malfunctions(instance.malfunction, agents, instance.tmax, args.seed)
    record = bool(args.log)
    rows = {}

    with contextlib.ExitStack() as stack:
        frames = stack.enter_context(open(args.frames, "w", encoding="utf-8")) if args.frames else None
        observer = _episode_observer(agents, rows, frames) if args.frames or args.record_commands else None

        if args.commands:
            mode = "replay"
            controller = ReplayController(load_commands(args.commands, agents))
            result, trajectory = run_episode(instance, controller, schedule, record=record, observer=observer)
        else:
            mode = args.mode
            solution = Solution.from_paths(instance, load_plan(args.plan, instance), "file")
            problems = validate_solution(solution)
            if problems:
                raise PlanMismatchError(f"plan/instance mismatch: {problems[0]}")
            settings = get_settings()
            config = ReplanConfig(
                runs=settings.replan_runs if args.runs is None else args.runs,
                iterations=settings.replan_iterations if args.iterations is None else args.iterations,
                mode=ReplanMode(args.mode),
            )
            result, trajectory = run_controller(
                instance, solution, config, schedule, seed=args.seed, record=record, observer=observer
            )

    if args.log:
        save_trajectory(trajectory, args.log)
    if args.record_commands:
        save_commands(rows, args.record_commands)
    report = episode_record(instance, mode, args.seed, result)
    if args.report:
        save_report(report, args.report)
    else:
        print(json.dumps(report))
    return 1 if result.aborted else 0


def cmd_bench(args):
    """Run a benchmark suite and write records plus summary tables."""
    suite = load_suite(args.suite)
    db = DatabaseHandler(args.out)
    for name in db.COLLECTIONS:
        db.drop_collection(name)

    run_suite(suite, db, jobs=args.jobs)
    db.save()

    analytics = AnalyticsManager(db)
    summary = analytics.write_summary(os.path.join(args.out, "summary.csv"))
    analytics.summary_by_level().to_csv(os.path.join(args.out, "levels.csv"), index=False)
    if len(suite.modes) >= 2:
        paired = analytics.paired_delays(suite.modes[0].value, suite.modes[1].value)
        paired.to_csv(os.path.join(args.out, "paired.csv"), index=False)

    failures = analytics.failure_counts()
    if failures:
        logger.warning("%d instances recorded failures: %s", len(failures), ", ".join(sorted(failures)))
    print(summary.to_string(index=False))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="railplan", description="Rail multi-agent planning and replanning")
    parser.add_argument("--log-level", default=None, help="Overrides RAILPLAN_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="Generate instance files")
    gen.add_argument("--config", required=True, help="Generation config (JSON)")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--seed", type=int, default=0, help="Seed of the first instance per config")
    gen.add_argument(
        "--malfunctions", action="store_true", help="Also write a malfunction schedule sampled with the instance seed"
    )
    gen.set_defaults(func=cmd_gen)

    solve = commands.add_parser("solve", help="Plan an instance")
    solve.add_argument("--instance", required=True)
    solve.add_argument("--portfolio", default=None, help="Comma-separated strategies, e.g. index,slack")
    solve.add_argument("--lns-iters", type=int, default=None, help="LNS iterations; defaults by agent count")
    solve.add_argument("--budget-ms", type=int, default=None, help="Wall-clock budget; overrides RAILPLAN_BUDGET_MS")
    solve.add_argument("--seed", type=int, default=None, help="LNS seed; defaults to the instance seed")
    solve.add_argument("--trace", default=None, help="Write the LNS iteration trace here")
    solve.add_argument("--out", required=True, help="Plan file to write")
    solve.set_defaults(func=cmd_solve)

    simulate = commands.add_parser("simulate", help="Execute a plan in the simulator")
    simulate.add_argument("--instance", required=True)
    source = simulate.add_mutually_exclusive_group(required=True)
    source.add_argument("--plan", help="Plan file written by `solve`")
    source.add_argument("--commands", help="Per-timestep command file to replay instead of a plan")
    simulate.add_argument("--mode", choices=[m.value for m in ReplanMode], default=ReplanMode.LNS_PR.value)
    simulate.add_argument("--seed", type=int, default=0, help="Malfunction and replanning seed")
    simulate.add_argument("--malfunctions", default=None, help="Malfunction schedule file instead of sampling")
    simulate.add_argument("--runs", type=int, default=None, help="Partial replanning runs r")
    simulate.add_argument("--iterations", type=int, default=None, help="LNS iterations p per run")
    simulate.add_argument("--log", default=None, help="Write the trajectory log here")
    simulate.add_argument("--report", default=None, help="Write the episode report here instead of stdout")
    simulate.add_argument("--frames", default=None, help="Write a text rendering of every timestep here")
    simulate.add_argument("--record-commands", default=None, help="Write the issued commands as a replayable command file")
    simulate.set_defaults(func=cmd_simulate)

    bench = commands.add_parser("bench", help="Run a benchmark suite")
    bench.add_argument("--suite", required=True, help="Suite file (JSON)")
    bench.add_argument("--jobs", type=int, default=1, help="Worker processes")
    bench.add_argument("--out", required=True, help="Output directory for records and CSV summaries")
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or get_settings().log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (RailPlanError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
