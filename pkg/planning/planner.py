import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

from engine.simulator import normalized_reward
from errors import TableConflictError
from models.railmap import UNREACHABLE, RailState
from models.scenario import Instance, TrainSpec
from planning.sipp import Path, PlanFailure, SafeIntervalTable, build_table, plan
from settings import get_settings

logger = logging.getLogger(__name__)


class PriorityStrategy(Enum):
    BY_INDEX = "index"
    BY_EARLIEST_ARRIVAL = "earliest-arrival"
    BY_SLACK = "slack"
    BY_SLACK_SLOW_FIRST = "slack-slow-first"


DEFAULT_PORTFOLIO = (
    PriorityStrategy.BY_INDEX,
    PriorityStrategy.BY_EARLIEST_ARRIVAL,
    PriorityStrategy.BY_SLACK,
    PriorityStrategy.BY_SLACK_SLOW_FIRST,
)


def estimated_arrival(instance: Instance, train: TrainSpec, path: Optional[Path]) -> float:
    """
    Arrival time the simulator would charge for a planned path.

    Paths arriving after tmax are charged from their planned state at tmax;
    unplanned trains as if they never entered.
    """
    if path is not None and path.planned_arrival <= instance.tmax:
        return path.planned_arrival
    state = path.state_at(instance.tmax) if path is not None else None
    origin = state or train.start_state
    return instance.tmax + instance.map.distance(origin, train.goal)


@dataclass(frozen=True)
class Solution:
    instance: Instance = field(repr=False, compare=False)
    paths: Tuple[Optional[Path], ...]
    delays: Tuple[float, ...]
    total_delay: float
    reward_estimate: float
    makespan: int
    success_count: int
    label: str = ""

    @classmethod
    def from_paths(cls, instance: Instance, paths: Sequence[Optional[Path]], label: str = "") -> "Solution":
        """
        Build a solution, recomputing every metric from the paths.

        Args:
            instance (Instance): Instance the paths belong to
            paths (Sequence[Path]): Path or None per agent
            label (str): Free-form origin tag

        Returns:
            Solution: Solution with delays, reward estimate and makespan
        """
        delays = []
        finished = []
        for train, path in zip(instance.trains, paths):
            arrival = estimated_arrival(instance, train, path)
            delays.append(max(arrival - train.eat, 0))
            if path is not None and path.planned_arrival <= instance.tmax:
                finished.append(path.planned_arrival)
        return cls(
            instance=instance,
            paths=tuple(paths),
            delays=tuple(delays),
            total_delay=sum(delays),
            reward_estimate=normalized_reward(delays, len(instance.trains), instance.tmax),
            makespan=max(finished, default=0),
            success_count=len(finished),
            label=label,
        )

    @property
    def planned_count(self) -> int:
        return sum(1 for path in self.paths if path is not None)

    def with_paths(self, paths: Sequence[Optional[Path]]) -> "Solution":
        return Solution.from_paths(self.instance, paths, self.label)


def planning_horizon(instance: Instance) -> int:
    return instance.tmax + get_settings().horizon_buffer


def order(instance: Instance, strategy: PriorityStrategy) -> List[int]:
    """
    Priority order of the agents under `strategy`.

    Slack is eat - edt - distance; ties go to the faster train, then the
    lower id (reversed for BY_SLACK_SLOW_FIRST). Agents with an unreachable
    goal always come last.

    Args:
        instance (Instance): Instance to order
        strategy (PriorityStrategy): Ordering rule

    Returns:
        list: Agent ids, highest priority first
    """
    trains = instance.trains
    if strategy is PriorityStrategy.BY_INDEX:
        return [train.id for train in trains]

    def key(train: TrainSpec):
        steps = instance.free_flow_distance(train.id)
        unreachable = steps == UNREACHABLE
        if strategy is PriorityStrategy.BY_EARLIEST_ARRIVAL:
            return unreachable, train.edt + train.cmax * steps, train.id
        slack = 0 if unreachable else train.eat - train.edt - steps
        if strategy is PriorityStrategy.BY_SLACK_SLOW_FIRST:
            return unreachable, slack, -train.cmax, -train.id
        return unreachable, slack, train.cmax, train.id

    return [train.id for train in sorted(trains, key=key)]


PARTIAL_SUFFIX = "+partial"


def prioritized_plan(
    instance: Instance, priority: Sequence[int], label: str = "", deadline: Optional[float] = None
) -> Solution:
    """
    Plan agents one by one, each avoiding every path planned before it.

    Agents whose search fails stay unplanned and are scored as never
    entering. Once `deadline` has passed the remaining agents stay
    unplanned too and the label gets a "+partial" suffix.

    Args:
        instance (Instance): Instance to solve
        priority (Sequence[int]): Agent ids, highest priority first
        label (str): Tag stored on the solution
        deadline (float, optional): `time.perf_counter()` value at which to stop

    Returns:
        Solution: Conflict-free solution
    """
    table = SafeIntervalTable(planning_horizon(instance))
    paths: List[Optional[Path]] = [None] * len(instance.trains)
    for position, agent in enumerate(priority):
        if deadline is not None and time.perf_counter() >= deadline:
            logger.warning(
                "%s: deadline reached with %d of %d agents still to plan",
                label or "prioritized plan", len(priority) - position, len(priority),
            )
            label += PARTIAL_SUFFIX
            break
        result = plan(instance.trains[agent], table, instance.map)
        if isinstance(result, PlanFailure):
            logger.debug("Agent %d left unplanned: %s", agent, result.reason)
            continue
        table.reserve(result)
        paths[agent] = result

    solution = Solution.from_paths(instance, paths, label)
    missing = len(paths) - solution.planned_count
    if missing:
        logger.warning("%s: %d of %d agents unplanned", label or "prioritized plan", missing, len(paths))
    return solution


def portfolio_plan(
    instance: Instance,
    strategies: Sequence[PriorityStrategy] = DEFAULT_PORTFOLIO,
    deadline: Optional[float] = None,
) -> Solution:
    """
    Run prioritized planning once per strategy and keep the best result.

    Runs go one after another. Under a deadline the first run may use all
    of it and every later run gets an equal share of the time still left.
    A run cut short keeps the agents it planned and competes like the
    others. Best means least total delay, then most agents planned, then
    the earlier strategy in the list.

    Args:
        instance (Instance): Instance to solve
        strategies (Sequence[PriorityStrategy]): Orders to try
        deadline (float, optional): Wall-clock budget in seconds

    Returns:
        Solution: Best solution found
    """
    if not strategies:
        raise ValueError("portfolio needs at least one strategy")

    started = time.perf_counter()
    end = None if deadline is None else started + deadline
    best: Optional[Solution] = None
    best_key = None
    for position, strategy in enumerate(strategies):
        run_deadline = None
        if end is not None:
            left = end - time.perf_counter()
            if left <= 0 and best is not None:
                logger.warning("Portfolio budget spent; %d strategies not tried", len(strategies) - position)
                break
            share = 1 if best is None else len(strategies) - position
            run_deadline = time.perf_counter() + max(left, 0.0) / share

        solution = prioritized_plan(instance, order(instance, strategy), strategy.value, run_deadline)
        key = (solution.total_delay, -solution.planned_count, position)
        if best_key is None or key < best_key:
            best, best_key = solution, key

    logger.info(
        "Portfolio winner %s: total delay %s, %d/%d planned (%.2fs)",
        best.label, best.total_delay, best.planned_count, len(instance.trains), time.perf_counter() - started,
    )
    return best


def validate_solution(solution: Solution) -> List[str]:
    """
    Independent check of a solution against its instance.

    Returns:
        list: Problems found; empty when every path is well formed and no two conflict
    """
    instance = solution.instance
    rail_map = instance.map
    problems = []
    for agent, path in enumerate(solution.paths):
        if path is None:
            continue
        train = instance.trains[agent]
        records = path.occupancy
        if not records:
            problems.append(f"agent {agent}: empty path")
            continue
        if path.agent != agent or path.goal != train.goal:
            problems.append(f"agent {agent}: path belongs to agent {path.agent} / goal {path.goal}")
        if records[0].cell != train.start or records[0].orientation != train.initial_orientation:
            problems.append(f"agent {agent}: path does not begin at the start state")
        if path.entry_time < train.edt or records[0].enter != path.entry_time:
            problems.append(f"agent {agent}: entry at {path.entry_time} before edt {train.edt}")
        states = [RailState(v.cell, v.orientation) for v in records]
        for k, visit in enumerate(records):
            leave = records[k + 1].enter if k + 1 < len(records) else path.planned_arrival
            if visit.leave != leave:
                problems.append(f"agent {agent}: record {k} leaves at {visit.leave}, next enters at {leave}")
            if visit.leave - visit.enter < train.cmax:
                problems.append(f"agent {agent}: record {k} shorter than cmax {train.cmax}")
            following = states[k + 1] if k + 1 < len(states) else None
            successors = rail_map.successors(states[k])
            if following is not None and following not in successors:
                problems.append(f"agent {agent}: record {k + 1} is not a rail successor")
            if following is None and path.goal not in {s.cell for s in successors}:
                problems.append(f"agent {agent}: last record is not adjacent to the goal")
    try:
        build_table(solution.paths)
    except TableConflictError as e:
        problems.append(str(e))
    return problems
