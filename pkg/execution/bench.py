"""
Solve-and-execute pipelines behind the command-line entry points.

Suite files are JSON documents::

    {"version": 1,
     "instances": [{"file": "level01-000-seed0.json", "seeds": [0, 1]}],
     "modes": ["mcp-only", "lns-pr"],
     "portfolio": ["index", "earliest-arrival", "slack", "slack-slow-first"],
     "lns_iterations": 50,
     "replan": {"runs": 20, "iterations": 20},
     "budget_ms": 60000, "total_budget_ms": 7200000}

Relative instance paths are resolved against the suite file's directory.
Everything except `instances` is optional.
"""
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, TimeoutError, as_completed
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

from database.db_handler import DatabaseHandler
from database.formats import FORMAT_VERSION, episode_record, load_instance
from errors import InstanceFormatError
from execution.executor import ReplanConfig, ReplanMode, run_controller
from models.scenario import Instance, sample_malfunctions
from planning.lns import IterationRecord, LnsConfig, LnsRun
from planning.planner import DEFAULT_PORTFOLIO, PARTIAL_SUFFIX, PriorityStrategy, Solution, portfolio_plan
from settings import get_settings

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveOutcome:
    solution: Solution
    seconds: float
    budget_hit: bool
    trace: Tuple[IterationRecord, ...]

    @property
    def status(self) -> str:
        return "budget" if self.budget_hit else "ok"

    def metrics(self) -> Dict[str, Any]:
        solution = self.solution
        return {
            "instance": solution.instance.name,
            "strategy": solution.label,
            "total_delay": solution.total_delay,
            "reward_estimate": solution.reward_estimate,
            "planned": solution.planned_count,
            "success_count": solution.success_count,
            "lns_iterations": len(self.trace),
            "planning_seconds": round(self.seconds, 3),
            "status": self.status,
        }


def parse_strategies(names: Sequence[str]) -> Tuple[PriorityStrategy, ...]:
    """Map strategy names such as "slack" onto `PriorityStrategy` members."""
    strategies = []
    for name in names:
        try:
            strategies.append(PriorityStrategy(name.strip()))
        except ValueError:
            known = ", ".join(s.value for s in PriorityStrategy)
            raise InstanceFormatError(f"portfolio: unknown strategy {name!r} (known: {known})") from None
    if not strategies:
        raise InstanceFormatError("portfolio: at least one strategy is required")
    return tuple(strategies)


def solve_instance(
    instance: Instance,
    strategies: Sequence[PriorityStrategy] = DEFAULT_PORTFOLIO,
    lns_iterations: Optional[int] = None,
    budget_ms: Optional[int] = None,
    seed: Optional[int] = None,
) -> SolveOutcome:
    """
    Portfolio prioritized planning followed by LNS, within one wall-clock budget.

    The portfolio may use `portfolio_share` of the budget; LNS gets whatever
    is left after it.

    Args:
        instance (Instance): Instance to solve
        strategies (Sequence[PriorityStrategy]): Portfolio orders
        lns_iterations (int, optional): LNS iterations; defaults by agent count
        budget_ms (int, optional): Wall-clock budget; defaults to settings
        seed (int, optional): LNS seed; defaults to the instance seed

    Returns:
        SolveOutcome: Best incumbent, flagged when the budget ran out
    """
    settings = get_settings()
    budget = (budget_ms if budget_ms is not None else settings.budget_ms) / 1000
    started = time.perf_counter()
    solution = portfolio_plan(instance, strategies, deadline=budget * settings.portfolio_share)
    elapsed = time.perf_counter() - started
    budget_hit = solution.label.endswith(PARTIAL_SUFFIX)

    overrides: Dict[str, Any] = {
        "seed": instance.seed if seed is None else seed,
        "deadline": max(budget - elapsed, 0.0),
    }
    if lns_iterations is not None:
        overrides["iteration_limit"] = lns_iterations
    run = LnsRun(LnsConfig.for_instance(instance, **overrides))
    solution = run.run(solution)
    budget_hit = budget_hit or run.deadline_hit

    seconds = time.perf_counter() - started
    if budget_hit:
        logger.warning("%s: %.1fs budget exhausted, keeping the best incumbent", instance.name, budget)
    return SolveOutcome(solution, seconds, budget_hit, tuple(run.trace))


@dataclass(frozen=True)
class SuiteEntry:
    instance_file: str
    seeds: Tuple[int, ...]


@dataclass(frozen=True)
class BenchmarkSuite:
    entries: Tuple[SuiteEntry, ...]
    modes: Tuple[ReplanMode, ...] = (ReplanMode.LNS_PR,)
    strategies: Tuple[PriorityStrategy, ...] = DEFAULT_PORTFOLIO
    lns_iterations: Optional[int] = None
    replan_runs: int = 20
    replan_iterations: int = 20
    budget_ms: int = 60000
    total_budget_ms: Optional[int] = None

    def __post_init__(self):
        if self.budget_ms <= 0 or (self.total_budget_ms is not None and self.total_budget_ms <= 0):
            raise ValueError("suite budgets must be positive")


def _field(doc: Dict[str, Any], key: str, kind, default):
    value = doc.get(key, default)
    if value is not default and (isinstance(value, bool) or not isinstance(value, kind)):
        raise InstanceFormatError(f"{key}: expected {kind.__name__}, got {value!r}")
    return value


def suite_from_dict(doc: Dict[str, Any], base_dir: str = ".") -> BenchmarkSuite:
    """
    Build a suite from its JSON document.

    Raises:
        InstanceFormatError: A field is missing, mistyped or out of range
    """
    if not isinstance(doc, dict):
        raise InstanceFormatError("suite: expected an object")
    version = doc.get("version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise InstanceFormatError(f"version: unsupported suite version {version}")

    entries = []
    items = doc.get("instances")
    if not isinstance(items, list) or not items:
        raise InstanceFormatError("instances: expected a non-empty list")
    for index, item in enumerate(items):
        where = f"instances[{index}]"
        if not isinstance(item, dict) or not isinstance(item.get("file"), str):
            raise InstanceFormatError(f"{where}.file: missing field")
        seeds = item.get("seeds", [0])
        if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise InstanceFormatError(f"{where}.seeds: expected a list of integers")
        entries.append(SuiteEntry(os.path.join(base_dir, item["file"]), tuple(seeds)))

    try:
        modes = tuple(ReplanMode(name) for name in _field(doc, "modes", list, [ReplanMode.LNS_PR.value]))
    except ValueError as e:
        raise InstanceFormatError(f"modes: {e}") from None
    strategies = parse_strategies(_field(doc, "portfolio", list, [s.value for s in DEFAULT_PORTFOLIO]))
    replan = _field(doc, "replan", dict, {})
    settings = get_settings()
    try:
        return BenchmarkSuite(
            entries=tuple(entries),
            modes=modes,
            strategies=strategies,
            lns_iterations=_field(doc, "lns_iterations", int, None),
            replan_runs=_field(replan, "runs", int, settings.replan_runs),
            replan_iterations=_field(replan, "iterations", int, settings.replan_iterations),
            budget_ms=_field(doc, "budget_ms", int, settings.budget_ms),
            total_budget_ms=_field(doc, "total_budget_ms", int, None),
        )
    except ValueError as e:
        raise InstanceFormatError(f"suite: {e}") from None


def load_suite(path: str) -> BenchmarkSuite:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise InstanceFormatError(f"{path}: line {e.lineno}: {e.msg}") from e
    return suite_from_dict(doc, os.path.dirname(os.path.abspath(path)))


def _failure(entry: SuiteEntry, stage: str, error: BaseException) -> Dict[str, Any]:
    return {"file": os.path.basename(entry.instance_file), "stage": stage, "error": f"{type(error).__name__}: {error}"}


def bench_instance(suite: BenchmarkSuite, entry: SuiteEntry) -> Dict[str, List[Dict[str, Any]]]:
    """
    Solve one suite instance and execute it once per (seed, mode).

    Failures are returned as records instead of being raised.

    Returns:
        dict: Records per store collection
    """
    records: Dict[str, List[Dict[str, Any]]] = {name: [] for name in DatabaseHandler.COLLECTIONS}
    try:
        instance = load_instance(entry.instance_file)
    except Exception as e:
        logger.warning("Cannot load %s: %s", entry.instance_file, e)
        records["failures"].append(_failure(entry, "load", e))
        return records

    instance_id = instance.name or os.path.splitext(os.path.basename(entry.instance_file))[0]
    records["instances"].append({
        "instance": instance_id,
        "file": os.path.basename(entry.instance_file),
        "level": instance.level,
        "width": instance.map.width,
        "height": instance.map.height,
        "agents": len(instance.trains),
        "cities": len(instance.map.cities),
        "tmax": instance.tmax,
    })

    try:
        outcome = solve_instance(instance, suite.strategies, suite.lns_iterations, suite.budget_ms)
    except Exception as e:
        logger.exception("Solving %s failed", instance_id)
        records["failures"].append({**_failure(entry, "solve", e), "instance": instance_id})
        return records
    records["plans"].append({**outcome.metrics(), "instance": instance_id})

    for seed in entry.seeds:
        schedule = sample_malfunctions(instance.malfunction, len(instance.trains), instance.tmax, seed)
        for mode in suite.modes:
            config = ReplanConfig(suite.replan_runs, suite.replan_iterations, mode)
            try:
                result, _ = run_controller(instance, outcome.solution, config, schedule, seed=seed)
            except Exception as e:
                logger.exception("Episode %s seed %d (%s) failed", instance_id, seed, mode.value)
                records["failures"].append({**_failure(entry, "simulate", e), "instance": instance_id, "seed": seed})
                continue
            record = episode_record(instance, mode.value, seed, result)
            record["instance"] = instance_id
            record["plan_status"] = outcome.status
            records["episodes"].append(record)
    return records


def run_suite(suite: BenchmarkSuite, db: DatabaseHandler, jobs: int = 1) -> DatabaseHandler:
    """
    Run every suite entry and store the records, ordered by instance id.

    Args:
        suite (BenchmarkSuite): Suite to run
        db (DatabaseHandler): Store receiving the records
        jobs (int): Worker processes; 1 runs inline

    Returns:
        DatabaseHandler: The store passed in
    """
    started = time.perf_counter()
    total = suite.total_budget_ms / 1000 if suite.total_budget_ms is not None else None
    results: Dict[int, Dict[str, List[Dict[str, Any]]]] = {}

    def out_of_time(index: int) -> Dict[str, List[Dict[str, Any]]]:
        entry = suite.entries[index]
        failure = _failure(entry, "budget", TimeoutError("total suite budget exhausted"))
        return {"failures": [failure]}

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(bench_instance, suite, entry): i for i, entry in enumerate(suite.entries)}
            try:
                for future in as_completed(futures, timeout=total):
                    index = futures[future]
                    try:
                        results[index] = future.result()
                    except Exception as e:
                        logger.exception("Worker for %s failed", suite.entries[index].instance_file)
                        results[index] = {"failures": [_failure(suite.entries[index], "worker", e)]}
            except TimeoutError:
                logger.warning("Total suite budget exhausted; cancelling pending instances")
                for future in futures:
                    future.cancel()
    else:
        for index, entry in enumerate(suite.entries):
            if total is not None and time.perf_counter() - started > total:
                logger.warning("Total suite budget exhausted before %s", entry.instance_file)
                results[index] = out_of_time(index)
                continue
            results[index] = bench_instance(suite, entry)

    for index in range(len(suite.entries)):
        if index not in results:
            results[index] = out_of_time(index)

    mode_rank = {mode.value: rank for rank, mode in enumerate(suite.modes)}
    for name in DatabaseHandler.COLLECTIONS:
        documents = [doc for index in sorted(results) for doc in results[index].get(name, [])]
        if name == "episodes":
            documents.sort(key=lambda d: (d["instance"], d["seed"], mode_rank.get(d["mode"], 0)))
        else:
            documents.sort(key=lambda d: str(d.get("instance", d.get("file"))))
        for document in documents:
            db.insert_one(name, document)

    logger.info(
        "Suite finished: %d episodes, %d failures (%.1fs)",
        len(db.get_collection("episodes")), len(db.get_collection("failures")), time.perf_counter() - started,
    )
    return db
