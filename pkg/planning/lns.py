import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from errors import TableConflictError
from models.railmap import RailState
from models.scenario import Instance, seeded_generator
from planning.planner import Solution, planning_horizon
from planning.sipp import Path, PlanFailure, SafeIntervalTable, StartOverride, Visit, build_table, plan
from settings import get_settings

logger = logging.getLogger(__name__)

LNS_STREAM = 2


class NeighborhoodStrategy(Enum):
    AGENT_BASED = "agent"
    INTERSECTION_BASED = "intersection"
    DELAY_BASED = "delay"


class LnsMode(Enum):
    ADAPTIVE = "adaptive"
    DELAY_ONLY = "delay"


def iteration_limit_for(agents: int) -> int:
    """LNS iterations for an instance with `agents` trains: fewer at both ends of the size range."""
    settings = get_settings()
    if settings.lns_small_agents < agents <= settings.lns_large_agents:
        return settings.lns_middle_iterations
    return settings.lns_edge_iterations


@dataclass
class AdaptiveWeights:
    """
    Selection weights per neighborhood strategy.

    A strategy's weight is smoothed towards its relative improvement each
    time it is used and never drops below `min_weight`.
    """

    strategies: Tuple[NeighborhoodStrategy, ...]
    weights: np.ndarray
    decay: float
    min_weight: float

    @classmethod
    def uniform(cls, strategies: Sequence[NeighborhoodStrategy], decay: float, min_weight: float) -> "AdaptiveWeights":
        if not 0 < decay < 1 or min_weight <= 0:
            raise ValueError(f"invalid adaptive parameters: decay {decay}, min weight {min_weight}")
        return cls(tuple(strategies), np.ones(len(strategies)), decay, min_weight)

    def probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def choose(self, rng: np.random.Generator) -> NeighborhoodStrategy:
        cumulative = np.cumsum(self.weights)
        index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
        return self.strategies[min(index, len(self.strategies) - 1)]

    def update(self, strategy: NeighborhoodStrategy, improvement: float, baseline: float):
        # an unreachable goal makes the baseline infinite; no ratio to learn from
        if not np.isfinite(baseline):
            return
        index = self.strategies.index(strategy)
        relative = max(improvement, 0) / baseline if baseline > 0 else 0.0
        value = self.decay * self.weights[index] + (1 - self.decay) * relative
        self.weights[index] = max(value, self.min_weight)


@dataclass(frozen=True)
class LnsConfig:
    iteration_limit: int
    mode: LnsMode = LnsMode.ADAPTIVE
    seed: int = 0
    neighborhood_size: int = 8
    decay: float = 0.9
    min_weight: float = 0.01
    deadline: Optional[float] = None

    @classmethod
    def for_instance(cls, instance: Instance, **overrides) -> "LnsConfig":
        settings = get_settings()
        values = dict(
            iteration_limit=iteration_limit_for(len(instance.trains)),
            neighborhood_size=settings.neighborhood_size,
            decay=settings.adaptive_decay,
            min_weight=settings.adaptive_min_weight,
        )
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class ReplanScope:
    """
    Execution-time restrictions on replanning.

    Frozen agents are never selected. Agents on the map are replanned from
    their current state, agents still off map no earlier than their
    not-before time, and the executed prefix of each path is kept as is.
    Delay-based neighborhoods seed on `focus` agents while any of them is
    still delayed.
    """

    now: int
    frozen: FrozenSet[int] = frozenset()
    overrides: Dict[int, StartOverride] = field(default_factory=dict)
    not_before: Dict[int, int] = field(default_factory=dict)
    prefixes: Dict[int, Tuple[Visit, ...]] = field(default_factory=dict)
    focus: FrozenSet[int] = frozenset()

    def origin(self, instance: Instance, agent: int) -> RailState:
        override = self.overrides.get(agent)
        return override.state if override else instance.trains[agent].start_state

    def merge(self, path: Path) -> Path:
        prefix = self.prefixes.get(path.agent, ())
        if not prefix:
            return path
        return replace(path, occupancy=prefix + path.occupancy)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    strategy: str
    size: int
    before: float
    after: float
    accepted: bool


def _movable(solution: Solution, scope: Optional[ReplanScope]) -> List[int]:
    frozen = scope.frozen if scope else frozenset()
    return [agent for agent in range(len(solution.paths)) if agent not in frozen]


def _add_unique(found: List[int], agents: Sequence[int], seed: int, frozen: FrozenSet[int]):
    for agent in agents:
        if agent != seed and agent not in frozen and agent not in found:
            found.append(agent)


def _route_blockers(
    solution: Solution, seed: int, table: SafeIntervalTable, scope: Optional[ReplanScope]
) -> List[int]:
    # Reservations on the seed's free-flow route inside its feasible window,
    # nearest to the goal first.
    instance = solution.instance
    train = instance.trains[seed]
    origin = scope.origin(instance, seed) if scope else train.start_state
    path = solution.paths[seed]
    lo = scope.now if scope else train.edt
    hi = path.planned_arrival if path is not None else table.horizon
    frozen = scope.frozen if scope else frozenset()

    found: List[int] = []
    for state in reversed(instance.map.shortest_route(origin, train.goal)):
        _add_unique(found, table.occupants(state.cell, lo, hi), seed, frozen)
    return found


def _wait_blockers(
    solution: Solution, seed: int, table: SafeIntervalTable, scope: Optional[ReplanScope]
) -> List[int]:
    # Reservations that held the next cell while the seed was waiting for it.
    instance = solution.instance
    train = instance.trains[seed]
    path = solution.paths[seed]
    if path is None:
        return []
    frozen = scope.frozen if scope else frozenset()
    executed = len(scope.prefixes.get(seed, ())) if scope else 0
    records = path.occupancy

    found: List[int] = []
    for k in range(len(records) - 1, executed - 1, -1):
        next_cell = records[k + 1].cell if k + 1 < len(records) else path.goal
        next_enter = records[k].leave
        earliest = max(records[k].enter + train.cmax, scope.now + 1 if scope else 0)
        if next_enter > earliest:
            _add_unique(found, table.occupants(next_cell, earliest, next_enter), seed, frozen)
    if not scope or seed not in scope.overrides:
        not_before = max(train.edt, scope.not_before.get(seed, 1) if scope else 1)
        if path.entry_time > not_before:
            _add_unique(found, table.occupants(train.start, not_before, path.entry_time), seed, frozen)
    return found


def _select(
    solution: Solution,
    strategy: NeighborhoodStrategy,
    rng: np.random.Generator,
    size: int,
    table: SafeIntervalTable,
    scope: Optional[ReplanScope] = None,
    tabu: Set[int] = frozenset(),
) -> Tuple[Optional[int], List[int]]:
    movable = _movable(solution, scope)
    delayed = [agent for agent in movable if solution.delays[agent] > 0]

    if strategy is NeighborhoodStrategy.INTERSECTION_BASED:
        frozen = scope.frozen if scope else frozenset()
        cells = [
            cell for cell in solution.instance.map.intersections()
            if len(table.visitors(cell) - frozen) >= 2
        ]
        if not cells:
            return None, []
        cell = cells[int(rng.integers(len(cells)))]
        visitors = sorted(table.visitors(cell) - frozen)
        picked = [int(agent) for agent in rng.permutation(visitors)[:size]]
        return None, picked

    if not delayed:
        return None, []

    if strategy is NeighborhoodStrategy.AGENT_BASED:
        candidates = [agent for agent in delayed if agent not in tabu] or delayed
        seed = max(candidates, key=lambda agent: (solution.delays[agent], -agent))
        blockers = _wait_blockers(solution, seed, table, scope) or _route_blockers(solution, seed, table, scope)
    else:
        pool = [agent for agent in delayed if agent in scope.focus] if scope else []
        pool = pool or delayed
        seed = pool[int(rng.integers(len(pool)))]
        blockers = _route_blockers(solution, seed, table, scope)
    return seed, [seed] + blockers[: size - 1]


def select_neighborhood(
    solution: Solution,
    strategy: NeighborhoodStrategy,
    rng: np.random.Generator,
    size: Optional[int] = None,
    table: Optional[SafeIntervalTable] = None,
    scope: Optional[ReplanScope] = None,
) -> Set[int]:
    """
    Pick the agents to destroy and replan.

    DELAY_BASED seeds on a random delayed agent, a focus agent of the scope
    when one is delayed, and adds the agents reserving cells of its
    free-flow route. AGENT_BASED seeds on the most
    delayed agent and adds the agents that made it wait.
    INTERSECTION_BASED takes agents visiting one random busy intersection.

    Args:
        solution (Solution): Incumbent solution
        strategy (NeighborhoodStrategy): Selection rule
        rng (np.random.Generator): Random source
        size (int, optional): Neighborhood size cap (at least 2)
        table (SafeIntervalTable, optional): Reservations of `solution`; built when omitted
        scope (ReplanScope, optional): Execution-time restrictions

    Returns:
        set: Selected agent ids; empty when nothing qualifies
    """
    size = size or get_settings().neighborhood_size
    if size < 2:
        raise ValueError(f"neighborhood size must be at least 2, got {size}")
    if table is None:
        table = build_table(solution.paths, planning_horizon(solution.instance), scope.now if scope else 0)
    _, agents = _select(solution, strategy, rng, size, table, scope)
    return set(agents)


def _plan_agent(
    instance: Instance, table: SafeIntervalTable, agent: int, scope: Optional[ReplanScope]
) -> Union[Path, PlanFailure]:
    train = instance.trains[agent]
    if scope is None:
        return plan(train, table, instance.map)
    override = scope.overrides.get(agent)
    if override is not None:
        result = plan(train, table, instance.map, start_override=override)
    else:
        result = plan(train, table, instance.map, not_before=scope.not_before.get(agent, 1))
    return scope.merge(result) if isinstance(result, Path) else result


def replan_neighborhood(
    solution: Solution,
    agents: Set[int],
    rng: np.random.Generator,
    table: Optional[SafeIntervalTable] = None,
    scope: Optional[ReplanScope] = None,
) -> Solution:
    """
    Remove the agents' paths and replan them in a random priority order.

    When `table` is given it must hold the reservations of `solution`; it
    is left holding those of the returned candidate.

    Args:
        solution (Solution): Incumbent solution
        agents (set): Agents to replan
        rng (np.random.Generator): Random source for the priority order
        table (SafeIntervalTable, optional): Reservations to update in place
        scope (ReplanScope, optional): Execution-time restrictions

    Returns:
        Solution: Candidate, possibly with newly unplanned agents
    """
    if not agents:
        return solution
    instance = solution.instance
    since = scope.now if scope else 0
    if table is None:
        table = build_table(
            [path for agent, path in enumerate(solution.paths) if agent not in agents],
            planning_horizon(instance),
            since,
        )
    else:
        for agent in agents:
            table.release(agent)

    paths = list(solution.paths)
    for agent in rng.permutation(sorted(agents)):
        agent = int(agent)
        result = _plan_agent(instance, table, agent, scope)
        if isinstance(result, PlanFailure):
            logger.debug("Replanning agent %d failed: %s", agent, result.reason)
            paths[agent] = None
            continue
        table.reserve(result, since)
        paths[agent] = result
    return solution.with_paths(paths)


class LnsRun:
    """
    One anytime improvement loop over an incumbent solution.

    Each iteration destroys a neighborhood, replans it and keeps the
    candidate only if the total delay strictly drops. The trace and the
    adaptive weights stay available after `run`.
    """

    def __init__(self, config: LnsConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.rng = rng if rng is not None else seeded_generator(config.seed, LNS_STREAM)
        self.weights = AdaptiveWeights.uniform(list(NeighborhoodStrategy), config.decay, config.min_weight)
        self.trace: List[IterationRecord] = []
        self.deadline_hit = False

    def _strategy(self) -> NeighborhoodStrategy:
        if self.config.mode is LnsMode.DELAY_ONLY:
            return NeighborhoodStrategy.DELAY_BASED
        return self.weights.choose(self.rng)

    def run(self, solution: Solution, scope: Optional[ReplanScope] = None) -> Solution:
        """
        Improve `solution` for at most `config.iteration_limit` iterations.

        Args:
            solution (Solution): Starting incumbent
            scope (ReplanScope, optional): Execution-time restrictions

        Returns:
            Solution: Best solution found; total delay never above the input's
        """
        config = self.config
        incumbent = solution
        if config.iteration_limit <= 0 or incumbent.total_delay == 0:
            return incumbent

        since = scope.now if scope else 0
        try:
            table = build_table(incumbent.paths, planning_horizon(incumbent.instance), since)
        except TableConflictError as e:
            logger.warning("Skipping improvement, incumbent is inconsistent: %s", e)
            return incumbent

        started = time.perf_counter()
        tabu: Set[int] = set()
        for iteration in range(1, config.iteration_limit + 1):
            if config.deadline is not None and time.perf_counter() - started > config.deadline:
                self.deadline_hit = True
                logger.warning("LNS stopped by its %.1fs deadline after %d iterations", config.deadline, iteration - 1)
                break
            if incumbent.total_delay == 0:
                break

            strategy = self._strategy()
            seed, agents = _select(incumbent, strategy, self.rng, config.neighborhood_size, table, scope, tabu)
            if strategy is NeighborhoodStrategy.AGENT_BASED and seed is not None:
                delayed = {a for a in _movable(incumbent, scope) if incumbent.delays[a] > 0}
                tabu = tabu | {seed} if not delayed <= tabu else {seed}

            before = incumbent.total_delay
            after = before
            accepted = False
            if agents:
                candidate = replan_neighborhood(incumbent, set(agents), self.rng, table, scope)
                after = candidate.total_delay
                lost = any(incumbent.paths[a] is not None and candidate.paths[a] is None for a in agents)
                accepted = after < before and not (scope is not None and lost)
                if accepted:
                    incumbent = candidate
                else:
                    for agent in agents:
                        table.release(agent)
                    for agent in agents:
                        if incumbent.paths[agent] is not None:
                            table.reserve(incumbent.paths[agent], since)

            if config.mode is LnsMode.ADAPTIVE:
                self.weights.update(strategy, before - after if accepted else 0.0, before)
            record = IterationRecord(iteration, strategy.value, len(agents), before, after, accepted)
            self.trace.append(record)
            logger.debug("LNS %s", record)

        logger.info(
            "LNS: total delay %s -> %s after %d iterations",
            solution.total_delay, incumbent.total_delay, len(self.trace),
        )
        return incumbent


def improve(solution: Solution, config: LnsConfig, scope: Optional[ReplanScope] = None) -> Solution:
    """Run one LNS loop; see `LnsRun.run`."""
    return LnsRun(config).run(solution, scope)
