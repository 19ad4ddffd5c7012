import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from models.railmap import Cell, Orientation, RailState, direction_between, outgoing_orientations, step_cell
from models.scenario import Instance, MalfunctionEvent

logger = logging.getLogger(__name__)


class Command(IntEnum):
    STOP = 0
    FORWARD = 1
    LEFT = 2
    RIGHT = 3

    @property
    def letter(self) -> str:
        return "SFLR"[self]

    @classmethod
    def from_letter(cls, letter: str) -> "Command":
        if len(letter) != 1:
            raise ValueError(f"not a command letter: {letter!r}")
        return cls("SFLR".index(letter))


class AgentStatus(Enum):
    OFF_MAP = "off"
    ON_MAP = "on"
    DONE = "done"


@dataclass
class AgentRuntime:
    status: AgentStatus
    position: Optional[Cell]
    orientation: Orientation
    counter: int = 0
    malfunction_left: int = 0
    entry_time: Optional[int] = None
    arrival: Optional[int] = None

    def copy(self) -> "AgentRuntime":
        return AgentRuntime(
            self.status, self.position, self.orientation, self.counter,
            self.malfunction_left, self.entry_time, self.arrival,
        )

    @property
    def rail_state(self) -> Optional[RailState]:
        if self.position is None:
            return None
        return RailState(self.position, self.orientation)


@dataclass
class SimState:
    """
    Live episode state at timestep `t`.

    `occupancy` maps every cell holding an on-map agent to that agent.
    `next_event` is a per-agent cursor into the malfunction schedule.
    """

    instance: Instance
    t: int
    agents: List[AgentRuntime]
    schedule: Tuple[Tuple[MalfunctionEvent, ...], ...]
    next_event: List[int]
    occupancy: Dict[Cell, int]
    revealed_at: int = -1
    ignored_commands: int = 0

    def copy(self) -> "SimState":
        return SimState(
            instance=self.instance,
            t=self.t,
            agents=[runtime.copy() for runtime in self.agents],
            schedule=self.schedule,
            next_event=list(self.next_event),
            occupancy=dict(self.occupancy),
            revealed_at=self.revealed_at,
            ignored_commands=self.ignored_commands,
        )

    def status_counts(self) -> Dict[AgentStatus, int]:
        counts = {status: 0 for status in AgentStatus}
        for runtime in self.agents:
            counts[runtime.status] += 1
        return counts

    def all_done(self) -> bool:
        return all(runtime.status is AgentStatus.DONE for runtime in self.agents)


class TrajectoryRecord(NamedTuple):
    t: int
    agent: int
    status: AgentStatus
    cell: Optional[Cell]
    orientation: Orientation
    counter: int
    malfunction_left: int


@dataclass(frozen=True)
class EpisodeResult:
    arrivals: Tuple[Optional[int], ...]
    delays: Tuple[float, ...]
    success_count: int
    reward: float
    steps: int
    aborted: bool = False
    ignored_commands: int = 0
    replans: int = 0
    planning_seconds: float = 0.0

    @property
    def success_rate(self) -> float:
        return self.success_count / len(self.arrivals) if self.arrivals else 1.0

    @property
    def total_delay(self) -> float:
        return sum(self.delays)


Controller = Callable[[SimState, List[MalfunctionEvent]], Mapping[int, Command]]
StepObserver = Callable[[SimState, Mapping[int, Command]], None]


def initial_state(instance: Instance, schedule: Optional[Sequence[Sequence[MalfunctionEvent]]] = None) -> SimState:
    """All agents parked off map at t = 0."""
    agents = [
        AgentRuntime(AgentStatus.OFF_MAP, None, train.initial_orientation)
        for train in instance.trains
    ]
    if schedule is None:
        schedule = [[] for _ in instance.trains]
    return SimState(
        instance=instance,
        t=0,
        agents=agents,
        schedule=tuple(tuple(events) for events in schedule),
        next_event=[0] * len(agents),
        occupancy={},
    )


def reveal_malfunctions(state: SimState) -> List[MalfunctionEvent]:
    """
    Apply the malfunctions starting at `state.t` in place.

    Returns:
        list: Events that started now; empty if already revealed for this timestep
    """
    if state.revealed_at == state.t:
        return []
    state.revealed_at = state.t
    revealed = []
    for agent, events in enumerate(state.schedule):
        index = state.next_event[agent]
        while index < len(events) and events[index].start <= state.t:
            event = events[index]
            index += 1
            runtime = state.agents[agent]
            if event.start < state.t or runtime.status is AgentStatus.DONE:
                continue
            runtime.malfunction_left = max(runtime.malfunction_left, event.duration)
            revealed.append(event)
        state.next_event[agent] = index
    return revealed


def resolve_exit(mask: int, orientation: Orientation, command: Command) -> Optional[Orientation]:
    """
    Exit heading chosen by `command` for a train heading `orientation`.

    A branch the cell does not offer degrades to the unique exit when there
    is exactly one, else to a stop.
    """
    exits = outgoing_orientations(mask, orientation)
    if not exits or command is Command.STOP:
        return None
    wanted = {
        Command.FORWARD: orientation,
        Command.LEFT: orientation.left(),
        Command.RIGHT: orientation.right(),
    }[command]
    if wanted in exits:
        return wanted
    if len(exits) == 1:
        return exits[0]
    return None


def command_towards(orientation: Orientation, cell: Cell, next_cell: Cell) -> Command:
    """Command that moves a train heading `orientation` from `cell` into adjacent `next_cell`."""
    heading = direction_between(cell, next_cell)
    if heading == orientation:
        return Command.FORWARD
    if heading == orientation.left():
        return Command.LEFT
    if heading == orientation.right():
        return Command.RIGHT
    return Command.STOP


def _resolve_conflicts(
    agents: List[AgentRuntime], occupancy: Dict[Cell, int], intents: Dict[int, Tuple[RailState, bool]]
) -> Dict[int, Tuple[RailState, bool]]:
    active = dict(intents)
    while True:
        claims = defaultdict(list)
        for agent, (target, _) in active.items():
            claims[target.cell].append(agent)

        cancelled = set()
        for cell, claimants in claims.items():
            holder = occupancy.get(cell)
            if holder is not None and holder not in active:
                cancelled.update(claimants)
                continue
            if len(claimants) > 1:
                # On-map moves beat entries, then the lower id wins.
                winner = min(claimants, key=lambda a: (active[a][1], a))
                cancelled.update(a for a in claimants if a != winner)

        for agent, (target, is_entry) in active.items():
            if is_entry:
                continue
            other = occupancy.get(target.cell)
            if other is not None and other in active and active[other][0].cell == agents[agent].position:
                cancelled.update((agent, other))

        if not cancelled:
            return active
        for agent in cancelled:
            active.pop(agent, None)


def step(state: SimState, commands: Mapping[int, Command]) -> SimState:
    """
    Advance one timestep.

    Args:
        state (SimState): State at time t (left untouched)
        commands (Mapping[int, Command]): Command per agent; missing agents stop

    Returns:
        SimState: State at time t + 1
    """
    nxt = state.copy()
    reveal_malfunctions(nxt)
    instance = nxt.instance
    rail_map = instance.map

    intents: Dict[int, Tuple[RailState, bool]] = {}
    frozen = []
    for agent, runtime in enumerate(nxt.agents):
        command = commands.get(agent, Command.STOP)
        if runtime.status is AgentStatus.DONE:
            if agent in commands:
                nxt.ignored_commands += 1
                logger.debug("t=%d: command for finished agent %d ignored", nxt.t, agent)
            continue
        if runtime.malfunction_left > 0:
            frozen.append(runtime)
            continue
        train = instance.trains[agent]
        if runtime.status is AgentStatus.OFF_MAP:
            if command is Command.FORWARD and nxt.t + 1 >= train.edt:
                intents[agent] = (train.start_state, True)
            continue

        heading = resolve_exit(rail_map.mask(runtime.position), runtime.orientation, command)
        if heading is None:
            continue
        runtime.counter = min(runtime.counter + 1, train.cmax)
        if runtime.counter == train.cmax:
            intents[agent] = (RailState(step_cell(runtime.position, heading), heading), False)

    moved = _resolve_conflicts(nxt.agents, nxt.occupancy, intents)
    arrived_at = nxt.t + 1
    for agent, (target, is_entry) in moved.items():
        runtime = nxt.agents[agent]
        runtime.position = target.cell
        runtime.orientation = target.orientation
        runtime.counter = 0
        if is_entry:
            runtime.status = AgentStatus.ON_MAP
            runtime.entry_time = arrived_at
        elif target.cell == instance.trains[agent].goal:
            runtime.status = AgentStatus.DONE
            runtime.position = None
            runtime.arrival = arrived_at

    for runtime in frozen:
        runtime.malfunction_left -= 1

    nxt.occupancy = {
        runtime.position: agent
        for agent, runtime in enumerate(nxt.agents)
        if runtime.status is AgentStatus.ON_MAP
    }
    nxt.t = arrived_at
    return nxt


def normalized_reward(delays: Sequence[float], agents: int, tmax: int) -> float:
    """1 - sum(delays) / (agents * tmax), clamped to [0, 1]."""
    if agents == 0:
        return 1.0
    value = 1 - sum(delays) / (agents * tmax)
    return min(1.0, max(0.0, value))


def score(instance: Instance, state: SimState) -> EpisodeResult:
    """
    Score the final state of an episode.

    Unfinished agents are charged tmax plus their remaining free-flow
    distance, measured from the start state when they never entered.

    Args:
        instance (Instance): Instance being scored
        state (SimState): Final state

    Returns:
        EpisodeResult: Arrivals, delays and normalized reward
    """
    arrivals = []
    delays = []
    for train, runtime in zip(instance.trains, state.agents):
        if runtime.status is AgentStatus.DONE:
            arrivals.append(runtime.arrival)
            actual = runtime.arrival
        else:
            arrivals.append(None)
            origin = runtime.rail_state or train.start_state
            actual = instance.tmax + instance.map.distance(origin, train.goal)
        delays.append(max(actual - train.eat, 0))

    return EpisodeResult(
        arrivals=tuple(arrivals),
        delays=tuple(delays),
        success_count=sum(1 for a in arrivals if a is not None),
        reward=normalized_reward(delays, len(instance.trains), instance.tmax),
        steps=state.t,
        ignored_commands=state.ignored_commands,
    )


def snapshot(state: SimState) -> List[TrajectoryRecord]:
    return [
        TrajectoryRecord(state.t, agent, rt.status, rt.position, rt.orientation, rt.counter, rt.malfunction_left)
        for agent, rt in enumerate(state.agents)
    ]


def run_episode(
    instance: Instance,
    controller: Controller,
    schedule: Optional[Sequence[Sequence[MalfunctionEvent]]] = None,
    horizon: Optional[int] = None,
    record: bool = False,
    observer: Optional[StepObserver] = None,
) -> Tuple[EpisodeResult, List[TrajectoryRecord]]:
    """
    Run an episode until every agent is done or the horizon is reached.

    The controller sees each malfunction only at its onset.

    Args:
        instance (Instance): Instance to execute
        controller (Controller): Maps (state, newly revealed malfunctions) to commands
        schedule (list, optional): Per-agent malfunction events
        horizon (int, optional): Last timestep; defaults to tmax
        record (bool): Keep the full trajectory
        observer (StepObserver, optional): Called with each state and the commands issued in it

    Returns:
        tuple: (EpisodeResult, trajectory records)
    """
    state = initial_state(instance, schedule)
    limit = instance.tmax if horizon is None else horizon
    trajectory = snapshot(state) if record else []
    aborted = False

    while state.t < limit and not state.all_done():
        revealed = reveal_malfunctions(state)
        try:
            commands = controller(state, revealed)
        except Exception:
            logger.warning("Controller failed at t=%d, episode aborted", state.t, exc_info=True)
            aborted = True
            break
        if observer is not None:
            observer(state, commands)
        state = step(state, commands)
        if record:
            trajectory.extend(snapshot(state))

    result = score(instance, state)
    if aborted:
        result = replace(result, aborted=True)
    logger.info(
        "Episode finished at t=%d: %d/%d arrived, reward %.4f",
        state.t, result.success_count, len(instance.trains), result.reward,
    )
    return result, trajectory


def stop_controller(state: SimState, revealed: List[MalfunctionEvent]) -> Dict[int, Command]:
    return {}


class ReplayController:
    """Replays per-timestep command rows; timesteps without a row stop everyone."""

    def __init__(self, rows: Mapping[int, Sequence[Command]]):
        self.rows = rows

    def __call__(self, state: SimState, revealed: List[MalfunctionEvent]) -> Dict[int, Command]:
        row = self.rows.get(state.t, ())
        return {agent: command for agent, command in enumerate(row)}


class PlanFollower:
    """
    Turns planned paths into commands by timing alone.

    Each agent charges its speed counter ahead of time and moves on the
    step that lands it in its next cell at the planned enter time. Paths
    need `occupancy` records with `cell` and `enter`, plus `planned_arrival`
    and `goal`.
    """

    def __init__(self, paths: Sequence):
        self.paths = paths
        self.cursor = [-1] * len(paths)

    def _sync(self, agent: int, runtime: AgentRuntime):
        records = self.paths[agent].occupancy
        self.cursor[agent] = max(self.cursor[agent], 0)
        while self.cursor[agent] < len(records) - 1 and records[self.cursor[agent]].cell != runtime.position:
            self.cursor[agent] += 1

    def __call__(self, state: SimState, revealed: List[MalfunctionEvent]) -> Dict[int, Command]:
        commands = {}
        for agent, runtime in enumerate(state.agents):
            path = self.paths[agent]
            if path is None or runtime.status is AgentStatus.DONE:
                continue
            if runtime.status is AgentStatus.OFF_MAP:
                if state.t + 1 >= path.entry_time:
                    commands[agent] = Command.FORWARD
                continue

            self._sync(agent, runtime)
            index = self.cursor[agent]
            records = path.occupancy
            if index + 1 < len(records):
                next_cell, next_enter = records[index + 1].cell, records[index + 1].enter
            else:
                next_cell, next_enter = path.goal, path.planned_arrival

            cmax = state.instance.trains[agent].cmax
            move = command_towards(runtime.orientation, runtime.position, next_cell)
            if runtime.counter < cmax - 1 or state.t + 1 >= next_enter:
                commands[agent] = move
            else:
                commands[agent] = Command.STOP
        return commands


def render_frame(state: SimState) -> str:
    """Plain-text dump of the map with agent ids (last digit) at their cells."""
    markers = {
        runtime.position: str(agent % 10)
        for agent, runtime in enumerate(state.agents)
        if runtime.status is AgentStatus.ON_MAP
    }
    return f"t={state.t}\n" + state.instance.map.render(markers)
