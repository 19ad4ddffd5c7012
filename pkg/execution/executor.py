import logging
import time
from collections import defaultdict
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np

from engine.simulator import (
    AgentStatus,
    Command,
    EpisodeResult,
    SimState,
    StepObserver,
    TrajectoryRecord,
    command_towards,
    run_episode,
)
from errors import DesyncError
from models.railmap import Cell, RailState
from models.scenario import Instance, MalfunctionEvent, seeded_generator
from planning.lns import LnsConfig, LnsMode, LnsRun, ReplanScope
from planning.planner import Solution
from planning.sipp import Path, StartOverride, Visit
from settings import get_settings

logger = logging.getLogger(__name__)

REPLAN_STREAM = 3

# (agent, index): index len(occupancy) stands for the visit of the goal cell.
VisitKey = Tuple[int, int]


class ReplanMode(Enum):
    MCP_ONLY = "mcp-only"
    LNS_PR = "lns-pr"
    PER_MALFUNCTION_PR = "per-malfunction-pr"


@dataclass(frozen=True)
class ReplanConfig:
    runs: int = 20
    iterations: int = 20
    mode: ReplanMode = ReplanMode.LNS_PR

    def __post_init__(self):
        if self.runs < 0 or self.iterations < 0:
            raise ValueError(f"runs and iterations must be non-negative, got {self.runs}, {self.iterations}")

    @classmethod
    def from_settings(cls, mode: ReplanMode = ReplanMode.LNS_PR) -> "ReplanConfig":
        settings = get_settings()
        return cls(settings.replan_runs, settings.replan_iterations, mode)

    def instants(self, tmax: int) -> Set[int]:
        """Timesteps floor(i * tmax / r) for i = 1..r."""
        return {i * tmax // self.runs for i in range(1, self.runs + 1)} if self.runs else set()


@dataclass
class McpState:
    """
    Visit order of every cell plus each agent's progress along its path.

    `cursor` is -1 before entry, the index of the current record while on
    the map, and len(occupancy) + 1 once the goal is reached. `entered`
    holds the actual enter time of every executed record, followed by the
    arrival time.
    """

    visits: Dict[Cell, List[VisitKey]]
    rank: Dict[VisitKey, int]
    cursor: List[int]
    entered: List[List[int]]

    def has_left(self, agent: int, index: int) -> bool:
        return self.cursor[agent] > index

    def predecessor(self, cell: Cell, key: VisitKey) -> Optional[VisitKey]:
        position = self.rank[key]
        return self.visits[cell][position - 1] if position > 0 else None

    def history(self, agent: int, path: Path) -> Tuple[Visit, ...]:
        """Executed records before the current one, with actual times."""
        records = path.occupancy
        times = self.entered[agent]
        executed = min(self.cursor[agent], len(records))
        return tuple(
            replace(records[k], enter=times[k], leave=times[k + 1])
            for k in range(executed)
            if k + 1 < len(times)
        )

    def sync(self, state: SimState, solution: Solution):
        """
        Advance cursors to match the simulator.

        Raises:
            DesyncError: An agent is somewhere its path does not lead
        """
        for agent, runtime in enumerate(state.agents):
            path = solution.paths[agent]
            cursor = self.cursor[agent]
            if path is None:
                if runtime.status is not AgentStatus.OFF_MAP:
                    raise DesyncError(f"desync: unplanned agent {agent} is {runtime.status.value}")
                continue
            records = path.occupancy

            if runtime.status is AgentStatus.OFF_MAP:
                if cursor != -1:
                    raise DesyncError(f"desync: agent {agent} is off map at record {cursor}")
                continue

            if runtime.status is AgentStatus.DONE:
                if cursor == len(records) - 1:
                    self.entered[agent].append(runtime.arrival)
                    self.cursor[agent] = len(records) + 1
                elif cursor <= len(records):
                    raise DesyncError(f"desync: agent {agent} finished from record {cursor}")
                continue

            if cursor == -1:
                if runtime.position != records[0].cell:
                    raise DesyncError(f"desync: agent {agent} entered at {runtime.position}")
                self.entered[agent].append(runtime.entry_time)
                cursor = self.cursor[agent] = 0
            if records[cursor].cell == runtime.position:
                continue
            if cursor + 1 < len(records) and records[cursor + 1].cell == runtime.position:
                self.entered[agent].append(state.t)
                self.cursor[agent] = cursor + 1
                continue
            raise DesyncError(
                f"desync: agent {agent} at {runtime.position}, path expects {records[cursor].cell}"
            )


def build_mcp(solution: Solution, previous: Optional[McpState] = None) -> McpState:
    """
    Record the planned visit order of every cell.

    Args:
        solution (Solution): Solution to execute
        previous (McpState, optional): State whose cursors and actual times carry over

    Returns:
        McpState: Visit lists sorted by planned enter time
    """
    timed = defaultdict(list)
    for agent, path in enumerate(solution.paths):
        if path is None:
            continue
        for index, visit in enumerate(path.occupancy):
            timed[visit.cell].append((visit.enter, agent, index))
        timed[path.goal].append((path.planned_arrival, agent, len(path.occupancy)))

    visits = {}
    rank = {}
    for cell, entries in timed.items():
        entries.sort()
        visits[cell] = [(agent, index) for _, agent, index in entries]
        for position, key in enumerate(visits[cell]):
            rank[key] = position

    agents = len(solution.paths)
    if previous is not None:
        cursor = list(previous.cursor)
        entered = [list(times) for times in previous.entered]
    else:
        cursor = [-1] * agents
        entered = [[] for _ in range(agents)]
    return McpState(visits, rank, cursor, entered)


def _order_allows(mcp: McpState, state: SimState, cell: Cell, key: VisitKey) -> Tuple[bool, Optional[int]]:
    # Visits leave a cell in list order, so only the predecessor matters.
    # It may still be inside if it moves out in the same step.
    previous = mcp.predecessor(cell, key)
    if previous is None or mcp.has_left(*previous):
        return True, None
    agent, index = previous
    inside = mcp.cursor[agent] == index and state.agents[agent].status is AgentStatus.ON_MAP
    return (True, agent) if inside else (False, None)


def mcp_commands(state: SimState, mcp: McpState, solution: Solution) -> Dict[int, Command]:
    """
    Commands that keep every cell's planned visit order.

    An agent moves into its next cell only once the planned enter time has
    come and every earlier visitor has left, or its direct predecessor
    leaves in this very step. Speed counters are charged while waiting.

    Args:
        state (SimState): Current simulator state
        mcp (McpState): Visit orders and progress, synced in place
        solution (Solution): Paths being executed

    Returns:
        dict: Command per agent that still has a path to follow
    """
    mcp.sync(state, solution)
    instance = state.instance
    commands: Dict[int, Command] = {}
    candidates: Dict[int, Tuple[Command, Optional[int]]] = {}

    for agent, runtime in enumerate(state.agents):
        path = solution.paths[agent]
        if path is None or runtime.status is AgentStatus.DONE:
            continue
        if runtime.malfunction_left > 0:
            commands[agent] = Command.STOP
            continue
        records = path.occupancy
        if runtime.status is AgentStatus.OFF_MAP:
            target = 0
            cell, planned = records[0].cell, records[0].enter
            move = Command.FORWARD
        else:
            target = mcp.cursor[agent] + 1
            if target < len(records):
                cell, planned = records[target].cell, records[target].enter
            else:
                cell, planned = path.goal, path.planned_arrival
            move = command_towards(runtime.orientation, runtime.position, cell)
            if runtime.counter < instance.trains[agent].cmax - 1:
                commands[agent] = move
                continue

        if state.t + 1 < planned:
            commands[agent] = Command.STOP
            continue
        allowed, follows = _order_allows(mcp, state, cell, (agent, target))
        if allowed:
            candidates[agent] = (move, follows)
        else:
            commands[agent] = Command.STOP

    granted = set(candidates)
    changed = True
    while changed:
        changed = False
        for agent in list(granted):
            follows = candidates[agent][1]
            if follows is not None and follows not in granted:
                granted.discard(agent)
                changed = True

    for agent, (move, _) in candidates.items():
        commands[agent] = move if agent in granted else Command.STOP
    return commands


def _ready_time(state: SimState, agent: int) -> int:
    runtime = state.agents[agent]
    cmax = state.instance.trains[agent].cmax
    if runtime.status is AgentStatus.OFF_MAP:
        return max(state.instance.trains[agent].edt, state.t + 1 + runtime.malfunction_left)
    return state.t + runtime.malfunction_left + max(cmax - runtime.counter, 1)


def project(state: SimState, solution: Solution, mcp: McpState) -> Solution:
    """
    Re-time the remaining plan under MCP execution.

    Earliest enter times propagate along each path and along every cell's
    visit order (a temporal plan graph), starting from the actual
    positions, counters and known malfunctions. The executed prefix keeps
    its actual times.

    Args:
        state (SimState): Current simulator state
        solution (Solution): Paths being executed
        mcp (McpState): Synced visit orders and progress

    Returns:
        Solution: Paths with predicted timing and the matching predicted delays
    """
    instance = state.instance
    nodes: List[Tuple[int, int, int]] = []
    for agent, path in enumerate(solution.paths):
        if path is None or state.agents[agent].status is AgentStatus.DONE:
            continue
        first = mcp.cursor[agent] + 1
        for index in range(first, len(path.occupancy) + 1):
            planned = path.occupancy[index].enter if index < len(path.occupancy) else path.planned_arrival
            nodes.append((planned, agent, index))
    nodes.sort()

    def cell_of(agent: int, index: int) -> Cell:
        path = solution.paths[agent]
        return path.occupancy[index].cell if index < len(path.occupancy) else path.goal

    earliest: Dict[VisitKey, int] = {}

    def leave_of(agent: int, index: int) -> Optional[int]:
        if index == len(solution.paths[agent].occupancy):
            value = earliest.get((agent, index))
            return None if value is None else value + 1
        return earliest.get((agent, index + 1))

    for _ in range(len(nodes) + 1):
        changed = False
        for planned, agent, index in nodes:
            cmax = instance.trains[agent].cmax
            if index == mcp.cursor[agent] + 1:
                value = max(planned, _ready_time(state, agent))
            else:
                value = max(planned, earliest.get((agent, index - 1), planned) + cmax)
            previous = mcp.predecessor(cell_of(agent, index), (agent, index))
            if previous is not None and not mcp.has_left(*previous):
                leave = leave_of(*previous)
                if leave is not None:
                    value = max(value, leave)
            if earliest.get((agent, index)) != value:
                earliest[(agent, index)] = value
                changed = True
        if not changed:
            break
    else:
        logger.warning("Plan projection did not settle at t=%d", state.t)

    paths: List[Optional[Path]] = []
    for agent, path in enumerate(solution.paths):
        if path is None:
            paths.append(None)
            continue
        runtime = state.agents[agent]
        records = path.occupancy
        history = mcp.history(agent, path)
        if runtime.status is AgentStatus.DONE:
            times = mcp.entered[agent]
            paths.append(replace(path, entry_time=times[0], occupancy=history, planned_arrival=times[-1]))
            continue

        cursor = mcp.cursor[agent]
        visits = list(history)
        if cursor >= 0:
            visits.append(replace(records[cursor], enter=mcp.entered[agent][cursor], leave=earliest[(agent, cursor + 1)]))
        for index in range(cursor + 1, len(records)):
            visits.append(replace(records[index], enter=earliest[(agent, index)], leave=earliest[(agent, index + 1)]))
        entry_time = mcp.entered[agent][0] if cursor >= 0 else earliest[(agent, 0)]
        paths.append(
            replace(path, entry_time=entry_time, occupancy=tuple(visits), planned_arrival=earliest[(agent, len(records))])
        )
    return solution.with_paths(paths)


def replan_scope(
    state: SimState, solution: Solution, mcp: McpState, focus: FrozenSet[int] = frozenset()
) -> ReplanScope:
    """Freeze finished agents, pin executed prefixes and start from current states."""
    frozen = set()
    overrides = {}
    not_before = {}
    prefixes = {}
    for agent, runtime in enumerate(state.agents):
        path = solution.paths[agent]
        if runtime.status is AgentStatus.DONE:
            frozen.add(agent)
        elif runtime.status is AgentStatus.OFF_MAP:
            not_before[agent] = state.t + 1 + runtime.malfunction_left
        else:
            cursor = mcp.cursor[agent]
            prefixes[agent] = mcp.history(agent, path)
            overrides[agent] = StartOverride(
                state=RailState(runtime.position, runtime.orientation),
                time=state.t,
                counter=runtime.counter,
                malfunction_left=runtime.malfunction_left,
                entered=mcp.entered[agent][cursor],
                entry_time=runtime.entry_time,
            )
    return ReplanScope(state.t, frozenset(frozen), overrides, not_before, prefixes, focus)


def partial_replan(
    state: SimState,
    solution: Solution,
    mcp: McpState,
    iterations: int,
    rng: np.random.Generator,
) -> Tuple[Solution, McpState]:
    """
    Delay-based LNS over the unexecuted part of the plan.

    The remaining plan is projected first; when the projection predicts no
    extra delay, or LNS finds no strict improvement, the inputs are
    returned unchanged.
    LNS seeds on the agents whose predicted delay grew since `solution`
    was last planned.

    Args:
        state (SimState): Current simulator state
        solution (Solution): Paths being executed
        mcp (McpState): Visit orders and progress
        iterations (int): LNS iterations
        rng (np.random.Generator): Random source

    Returns:
        tuple: (solution, mcp) to continue with
    """
    if iterations <= 0:
        return solution, mcp
    mcp.sync(state, solution)
    projected = project(state, solution, mcp)
    if projected.total_delay <= solution.total_delay:
        return solution, mcp

    config = LnsConfig.for_instance(state.instance, iteration_limit=iterations, mode=LnsMode.DELAY_ONLY)
    grown = frozenset(
        agent for agent, delay in enumerate(projected.delays) if delay > solution.delays[agent]
    )
    improved = LnsRun(config, rng).run(projected, replan_scope(state, solution, mcp, grown))
    if improved.total_delay >= projected.total_delay:
        return solution, mcp
    logger.debug(
        "t=%d: predicted delay %s -> %s", state.t, projected.total_delay, improved.total_delay
    )
    return improved, build_mcp(improved, previous=mcp)


class McpController:
    """Executes a solution with MCP, replanning at the instants `config` asks for."""

    def __init__(self, instance: Instance, solution: Solution, config: ReplanConfig, seed: int = 0):
        self.instance = instance
        self.solution = solution
        self.config = config
        self.mcp = build_mcp(solution)
        self.rng = seeded_generator(seed, REPLAN_STREAM)
        self.instants = config.instants(instance.tmax) if config.mode is ReplanMode.LNS_PR else set()
        self.replans = 0
        self.planning_seconds = 0.0

    def _due(self, state: SimState, revealed: List[MalfunctionEvent]) -> bool:
        if self.config.mode is ReplanMode.LNS_PR:
            return state.t in self.instants
        if self.config.mode is ReplanMode.PER_MALFUNCTION_PR:
            return bool(revealed)
        return False

    def __call__(self, state: SimState, revealed: List[MalfunctionEvent]) -> Dict[int, Command]:
        self.mcp.sync(state, self.solution)
        if self._due(state, revealed):
            started = time.perf_counter()
            self.solution, self.mcp = partial_replan(
                state, self.solution, self.mcp, self.config.iterations, self.rng
            )
            self.planning_seconds += time.perf_counter() - started
            self.replans += 1
        return mcp_commands(state, self.mcp, self.solution)


def run_controller(
    instance: Instance,
    solution: Solution,
    config: ReplanConfig,
    schedule: Optional[Sequence[Sequence[MalfunctionEvent]]] = None,
    seed: int = 0,
    horizon: Optional[int] = None,
    record: bool = False,
    observer: Optional[StepObserver] = None,
) -> Tuple[EpisodeResult, List[TrajectoryRecord]]:
    """
    Execute a solution under MCP with the configured replanning mode.

    Args:
        instance (Instance): Instance to execute
        solution (Solution): Initial plan
        config (ReplanConfig): Replanning mode, runs and iterations
        schedule (list, optional): Per-agent malfunction events
        seed (int): Seed of the replanning random stream
        horizon (int, optional): Last timestep; defaults to tmax
        record (bool): Keep the full trajectory
        observer (StepObserver, optional): Called with each state and the commands issued in it

    Returns:
        tuple: (EpisodeResult with replan count and planning time, trajectory records)
    """
    controller = McpController(instance, solution, config, seed)
    result, trajectory = run_episode(
        instance, controller, schedule, horizon=horizon, record=record, observer=observer
    )
    result = replace(result, replans=controller.replans, planning_seconds=controller.planning_seconds)
    logger.info(
        "%s: reward %.4f, %d replans, %.2fs planning",
        config.mode.value, result.reward, result.replans, result.planning_seconds,
    )
    return result, trajectory
