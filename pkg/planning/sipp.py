import bisect
import heapq
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

from errors import TableConflictError
from models.railmap import Cell, Orientation, RailMap, RailState
from models.scenario import TrainSpec

logger = logging.getLogger(__name__)

FOREVER = math.inf

UNREACHABLE_GOAL = "unreachable"
BLOCKED = "blocked"


@dataclass(frozen=True)
class Visit:
    """The train holds `cell` with heading `orientation` on [enter, leave)."""

    cell: Cell
    orientation: Orientation
    enter: int
    leave: int


@dataclass(frozen=True)
class Path:
    agent: int
    entry_time: int
    occupancy: Tuple[Visit, ...]
    planned_arrival: int
    goal: Cell

    def state_at(self, t: int) -> Optional[RailState]:
        """Planned rail state at `t`; None while off map or after arrival."""
        for visit in self.occupancy:
            if visit.enter <= t < visit.leave:
                return RailState(visit.cell, visit.orientation)
        return None

    def cells(self) -> List[Cell]:
        return [visit.cell for visit in self.occupancy]


@dataclass(frozen=True)
class PlanFailure:
    agent: int
    reason: str


@dataclass(frozen=True)
class StartOverride:
    """
    Current situation of a train already on the map.

    `entered` is when it entered its current cell and `entry_time` when it
    entered the map; both are copied into the returned path.
    """

    state: RailState
    time: int
    counter: int = 0
    malfunction_left: int = 0
    entered: int = 0
    entry_time: int = 0


class SafeIntervalTable:
    """
    Reservations of a set of paths, queried as free intervals per cell.

    A path reserves each visited cell on [enter, leave), its goal cell on
    [arrival, arrival + 1) and every cell-to-cell move at the timestep it
    lands. Reservations before `since` are dropped, which lets execution-time
    planning ignore history.
    """

    def __init__(self, horizon: float = FOREVER):
        self.horizon = horizon
        self._occupied: Dict[Cell, List[Tuple[int, int, int]]] = {}
        self._edges: Dict[Tuple[Cell, Cell, int], int] = {}
        self._by_agent: Dict[int, Tuple[List[Tuple[Cell, int, int]], List[Tuple[Cell, Cell, int]]]] = {}
        self._free: Dict[Cell, Tuple[Tuple[int, float], ...]] = {}

    def __contains__(self, agent: int) -> bool:
        return agent in self._by_agent

    def reserve(self, path: Path, since: int = 0):
        """
        Add a path's reservations.

        Raises:
            TableConflictError: The path overlaps a reserved cell or swaps with a reserved move
        """
        if path.agent in self._by_agent:
            raise TableConflictError(f"input paths conflict: agent {path.agent} reserved twice")

        spans = []
        for visit in path.occupancy:
            start = max(visit.enter, since)
            if visit.leave > start:
                spans.append((visit.cell, start, visit.leave))
        if path.planned_arrival + 1 > since:
            spans.append((path.goal, max(path.planned_arrival, since), path.planned_arrival + 1))

        cells = [visit.cell for visit in path.occupancy] + [path.goal]
        lands = [visit.enter for visit in path.occupancy[1:]] + [path.planned_arrival]
        edges = [
            (cells[k], cells[k + 1], lands[k])
            for k in range(len(path.occupancy))
            if lands[k] >= since
        ]

        for cell, start, end in spans:
            other = self._overlapping(cell, start, end)
            if other is not None:
                raise TableConflictError(
                    f"input paths conflict: agents {other} and {path.agent} both hold {cell} around t={start}"
                )
        for frm, to, t in edges:
            other = self._edges.get((to, frm, t))
            if other is not None:
                raise TableConflictError(
                    f"input paths conflict: agents {other} and {path.agent} swap {frm} and {to} at t={t}"
                )

        for cell, start, end in spans:
            bisect.insort(self._occupied.setdefault(cell, []), (start, end, path.agent))
            self._free.pop(cell, None)
        for edge in edges:
            self._edges[edge] = path.agent
        self._by_agent[path.agent] = (spans, edges)

    def release(self, agent: int):
        """Remove every reservation of `agent`; unknown agents are ignored."""
        entry = self._by_agent.pop(agent, None)
        if entry is None:
            return
        spans, edges = entry
        for cell, start, end in spans:
            self._occupied[cell].remove((start, end, agent))
            self._free.pop(cell, None)
        for edge in edges:
            if self._edges.get(edge) == agent:
                del self._edges[edge]

    def _overlapping(self, cell: Cell, start: int, end: int) -> Optional[int]:
        occupied = self._occupied.get(cell)
        if not occupied:
            return None
        index = bisect.bisect_left(occupied, (start, -1, -1))
        if index > 0 and occupied[index - 1][1] > start:
            return occupied[index - 1][2]
        if index < len(occupied) and occupied[index][0] < end:
            return occupied[index][2]
        return None

    def free_intervals(self, cell: Cell) -> Tuple[Tuple[int, float], ...]:
        """Sorted, disjoint, maximal free intervals [l, u) of `cell`."""
        cached = self._free.get(cell)
        if cached is not None:
            return cached
        free = []
        cursor = 0
        for start, end, _ in self._occupied.get(cell, ()):
            if start > cursor:
                free.append((cursor, start))
            cursor = max(cursor, end)
        free.append((cursor, FOREVER))
        result = tuple(free)
        self._free[cell] = result
        return result

    def has_edge(self, frm: Cell, to: Cell, t: int) -> bool:
        """Whether a reserved train moves from `frm` into `to` landing at `t`."""
        return (frm, to, t) in self._edges

    def occupants(self, cell: Cell, lo: float, hi: float) -> List[int]:
        """Agents holding `cell` at some time in [lo, hi), by reservation start."""
        return [agent for start, end, agent in self._occupied.get(cell, ()) if start < hi and end > lo]

    def visitors(self, cell: Cell) -> Set[int]:
        return {agent for _, _, agent in self._occupied.get(cell, ())}

    def agents(self) -> List[int]:
        return sorted(self._by_agent)


def build_table(paths: Iterable[Optional[Path]], horizon: float = FOREVER, since: int = 0) -> SafeIntervalTable:
    """
    Reserve every given path in a fresh table.

    Args:
        paths (Iterable[Path]): Paths to reserve; None entries are skipped
        horizon (float): Search horizon stored on the table
        since (int): Drop reservations before this timestep

    Returns:
        SafeIntervalTable: Table holding all reservations

    Raises:
        TableConflictError: Two paths overlap in a cell or swap along an edge
    """
    table = SafeIntervalTable(horizon)
    for path in paths:
        if path is not None:
            table.reserve(path, since)
    return table


@dataclass
class _Node:
    state: RailState
    lower: int
    upper: float
    t: int
    ready: int
    parent: Optional[int]


def plan(
    train: TrainSpec,
    table: SafeIntervalTable,
    rail_map: RailMap,
    start_override: Optional[StartOverride] = None,
    not_before: int = 1,
) -> Union[Path, PlanFailure]:
    """
    Earliest-arrival path for one train against the reserved paths.

    Without an override the train starts off map and may enter its start
    cell at any free time no earlier than edt and `not_before`; waiting off
    map is free.

    Args:
        train (TrainSpec): Train to plan
        table (SafeIntervalTable): Reservations to avoid
        rail_map (RailMap): Rail network
        start_override (StartOverride, optional): Plan from the train's current cell instead
        not_before (int): Earliest entry time for an off-map start

    Returns:
        Path | PlanFailure: Path minimizing arrival time, or the failure reason
    """
    goal = train.goal
    cmax = train.cmax
    horizon = table.horizon
    distances = rail_map.distance_table(goal)

    def heuristic(state: RailState) -> float:
        steps = distances[state.cell[0], state.cell[1], state.orientation]
        return FOREVER if steps < 0 else cmax * int(steps)

    origin = start_override.state if start_override else train.start_state
    if heuristic(origin) == FOREVER:
        return PlanFailure(train.id, UNREACHABLE_GOAL)

    nodes: List[_Node] = []
    heap = []
    best: Dict[Tuple[Cell, int, int], int] = {}

    def push(node: _Node):
        key = (node.state.cell, node.state.orientation, node.lower)
        if node.t >= best.get(key, FOREVER):
            return
        best[key] = node.t
        nodes.append(node)
        # Ties on f go to the later (deeper) node.
        heapq.heappush(heap, (node.t + heuristic(node.state), -node.t, len(nodes) - 1))

    if start_override is None:
        for lower, upper in table.free_intervals(origin.cell):
            entry = max(train.edt, not_before, lower)
            if entry < upper and entry <= horizon:
                push(_Node(origin, lower, upper, entry, entry + cmax, None))
    else:
        now = start_override.time
        ready = now + start_override.malfunction_left + max(cmax - start_override.counter, 1)
        for lower, upper in table.free_intervals(origin.cell):
            if lower <= now < upper:
                push(_Node(origin, lower, upper, now, ready, None))
                break

    while heap:
        _, _, index = heapq.heappop(heap)
        node = nodes[index]
        if best.get((node.state.cell, node.state.orientation, node.lower)) != node.t:
            continue
        if node.state.cell == goal:
            return _reconstruct(train, nodes, index, start_override)

        for nxt in rail_map.successors(node.state):
            if heuristic(nxt) == FOREVER:
                continue
            for lower, upper in table.free_intervals(nxt.cell):
                if upper <= node.ready:
                    continue
                if lower > node.upper:
                    break
                latest = min(node.upper, upper - 1)
                arrive = max(node.ready, lower)
                while arrive <= latest and table.has_edge(nxt.cell, node.state.cell, arrive):
                    arrive += 1
                if arrive > latest or arrive > horizon:
                    continue
                push(_Node(nxt, lower, upper, arrive, arrive + cmax, index))

    logger.debug("No path for train %d within horizon %s", train.id, horizon)
    return PlanFailure(train.id, BLOCKED)


def _reconstruct(train: TrainSpec, nodes: List[_Node], index: int, start_override: Optional[StartOverride]) -> Path:
    chain = []
    while index is not None:
        chain.append(nodes[index])
        index = nodes[index].parent
    chain.reverse()

    visits = []
    for k, node in enumerate(chain[:-1]):
        enter = node.t
        if k == 0 and start_override is not None:
            enter = start_override.entered
        visits.append(Visit(node.state.cell, node.state.orientation, enter, chain[k + 1].t))

    entry_time = start_override.entry_time if start_override else chain[0].t
    return Path(
        agent=train.id,
        entry_time=entry_time,
        occupancy=tuple(visits),
        planned_arrival=chain[-1].t,
        goal=train.goal,
    )
