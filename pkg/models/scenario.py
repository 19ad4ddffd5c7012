import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import GenerationError
from models.railmap import (
    UNREACHABLE,
    Cell,
    City,
    Orientation,
    RailMap,
    RailState,
    TrackBuilder,
    direction_between,
    validate_map,
)
from settings import get_settings

logger = logging.getLogger(__name__)

# Stream identifiers for SeedSequence([seed, stream, ...]); changing them
# changes every generated file, so they are part of the format version.
GENERATION_STREAM = 0
MALFUNCTION_STREAM = 1
PRNG_NAME = "numpy-philox4x64/seedsequence"

_SEED_MASK = (1 << 64) - 1


def seeded_generator(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *keys); stable across platforms."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & _SEED_MASK, *keys])))


@dataclass(frozen=True)
class TrainSpec:
    id: int
    start: Tuple[int, int]
    initial_orientation: Orientation
    goal: Tuple[int, int]
    cmax: int
    edt: int
    eat: int

    @property
    def start_state(self) -> RailState:
        return RailState(self.start, self.initial_orientation)


@dataclass(frozen=True)
class MalfunctionParams:
    rate: float = 0.0
    min_duration: int = 10
    max_duration: int = 50


@dataclass(frozen=True)
class MalfunctionEvent:
    agent: int
    start: int
    duration: int


@dataclass(frozen=True)
class Instance:
    map: RailMap
    trains: Tuple[TrainSpec, ...]
    tmax: int
    malfunction: MalfunctionParams
    seed: int
    level: Optional[int] = None
    name: str = ""

    @property
    def agent_count(self) -> int:
        return len(self.trains)

    def free_flow_distance(self, agent: int) -> float:
        train = self.trains[agent]
        return self.map.distance(train.start_state, train.goal)


def compute_tmax(width: int, height: int, agents: int, cities: int) -> int:
    """
    Episode horizon floor(8 * (w + h + m / n)), computed exactly.

    Args:
        width (int): Map width in cells
        height (int): Map height in cells
        agents (int): Number of trains m
        cities (int): Number of cities n

    Returns:
        int: Last timestep of the episode
    """
    return math.floor(8 * (width + height + Fraction(agents, cities)))


@dataclass(frozen=True)
class GeneratorConfig:
    width: int
    height: int
    n_cities: int
    n_agents: int
    speed_mix: Tuple[Tuple[int, float], ...] = ((1, 0.25), (2, 0.25), (3, 0.25), (4, 0.25))
    slack_factor: float = 0.5
    departure_spread: float = 0.5
    city_length: int = 4
    jitter: int = 2
    malfunction: MalfunctionParams = field(default_factory=MalfunctionParams)
    level: Optional[int] = None


def _interpolate(first: float, last: float, fraction: float) -> int:
    return int(round(first * (last / first) ** fraction))


def level_preset(level: int, malfunction: Optional[MalfunctionParams] = None) -> GeneratorConfig:
    """
    Generator configuration for one of the 15 difficulty levels.

    Level 1 and 15 are fixed endpoints; the levels in between
    interpolate width, height, train and city counts geometrically.
    """
    if not 1 <= level <= 15:
        raise GenerationError(f"level must be within 1..15, got {level}")
    if malfunction is None:
        settings = get_settings()
        malfunction = MalfunctionParams(0.002, settings.malfunction_min, settings.malfunction_max)
    fraction = (level - 1) / 14
    size = _interpolate(30, 158, fraction)
    return GeneratorConfig(
        width=size,
        height=size,
        n_cities=_interpolate(2, 41, fraction),
        n_agents=_interpolate(7, 425, fraction),
        malfunction=malfunction,
        level=level,
    )


LEVEL_PRESETS: Dict[int, GeneratorConfig] = {}


def get_level_presets() -> Dict[int, GeneratorConfig]:
    if not LEVEL_PRESETS:
        LEVEL_PRESETS.update({level: level_preset(level) for level in range(1, 16)})
    return LEVEL_PRESETS


def _check_config(config: GeneratorConfig):
    if config.width < 20 or config.height < 20:
        raise GenerationError(f"map must be at least 20x20, got {config.width}x{config.height}")
    if config.n_cities < 2:
        raise GenerationError(f"at least 2 cities are required, got {config.n_cities}")
    if config.n_agents < 1:
        raise GenerationError(f"at least 1 train is required, got {config.n_agents}")
    speeds = [speed for speed, _ in config.speed_mix]
    if any(not 1 <= speed <= 4 for speed in speeds):
        raise GenerationError(f"speed counters must be within 1..4, got {speeds}")
    if abs(sum(share for _, share in config.speed_mix) - 1.0) > 1e-9:
        raise GenerationError("speed proportions must sum to 1")
    if config.city_length < 3:
        raise GenerationError(f"city_length must be at least 3, got {config.city_length}")
    params = config.malfunction
    if params.rate < 0 or params.min_duration < 1 or params.min_duration > params.max_duration:
        raise GenerationError(f"invalid malfunction parameters {params}")


RING_HEIGHT = 4


@dataclass(frozen=True)
class _Ring:
    """
    One city: a closed loop whose top and bottom rails are the city's two
    parallel tracks. The arrival station sits on the top rail and the
    departure station on the bottom rail, next to the east corner.
    """

    top: int
    left: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + RING_HEIGHT - 1

    @property
    def right(self) -> int:
        return self.left + self.width - 1

    def loop(self) -> List[Cell]:
        cells = [(self.top, col) for col in range(self.left, self.right + 1)]
        cells += [(row, self.right) for row in range(self.top + 1, self.bottom + 1)]
        cells += [(self.bottom, col) for col in range(self.right - 1, self.left - 1, -1)]
        cells += [(row, self.left) for row in range(self.bottom - 1, self.top, -1)]
        return cells

    def city(self) -> City:
        return City(arrival=(self.top, self.right - 1), departure=(self.bottom, self.right - 1))


@dataclass(frozen=True)
class _Lattice:
    rows: int
    cols: int
    row_pitch: int
    col_pitch: int
    ring_width: int
    jitter: int

    def band_top(self, row: int) -> int:
        return 1 + row * self.row_pitch

    def band_left(self, col: int) -> int:
        return 1 + col * self.col_pitch

    def street(self, row: int) -> Tuple[int, int]:
        """Rows between lattice rows `row` and `row + 1` that no ring or east-west corridor touches."""
        return self.band_top(row) + self.jitter + RING_HEIGHT, self.band_top(row + 1) - 1

    def avenue(self, col: int) -> Tuple[int, int]:
        """Columns between lattice columns `col` and `col + 1` that no ring or north-south corridor touches."""
        return self.band_left(col) + self.jitter + self.ring_width, self.band_left(col + 1) - 1


def _plan_lattice(config: GeneratorConfig) -> _Lattice:
    ring_width = config.city_length + 2
    cols = min(config.n_cities, math.ceil(math.sqrt(config.n_cities * config.width / config.height)))
    rows = math.ceil(config.n_cities / cols)
    col_pitch = (config.width - 2) // cols
    row_pitch = (config.height - 2) // rows

    # Corridors need two free lanes between neighbouring bands for their dog-legs.
    spare_cols = col_pitch - ring_width - (2 if cols > 1 else 0)
    spare_rows = row_pitch - RING_HEIGHT - (2 if rows > 1 else 0)
    if spare_cols < 0 or spare_rows < 0:
        raise GenerationError(
            f"{config.n_cities} cities do not fit on a {config.width}x{config.height} map "
            f"({rows}x{cols} lattice of {row_pitch}x{col_pitch} blocks)"
        )
    return _Lattice(rows, cols, row_pitch, col_pitch, ring_width, max(0, min(config.jitter, spare_cols, spare_rows)))


def _lay_corridor(builder: TrackBuilder, first: _Ring, second: _Ring, horizontal: bool, lane: Tuple[int, int]):
    """
    Double-track corridor from `first` to its east (or south) neighbour `second`.

    Both tracks leave `first` through switches on its facing side, run side
    by side, bend inside `lane` when the rings are offset and join `second`
    on the side facing back. The two switches at each end face opposite
    ways, so a train circling a ring in either direction can leave towards
    every neighbour.

    Args:
        builder (TrackBuilder): Track being drawn
        first (_Ring): West or north ring
        second (_Ring): East or south ring
        horizontal (bool): True for an east-west corridor
        lane (Tuple[int, int]): Inclusive range of free rows or columns for the bend
    """
    if horizontal:
        def to_cell(cross: int, along: int) -> Cell:
            return cross, along

        starts = (first.top + 1, first.top + 2)
        ends = (second.top + 1, second.top + 2)
        exit_at, entry_at = first.right, second.left
        shared = (Orientation.NORTH, Orientation.SOUTH)
    else:
        def to_cell(cross: int, along: int) -> Cell:
            return along, cross

        starts = (first.left + 1, first.left + 2)
        ends = (second.left + 1, second.left + 2)
        exit_at, entry_at = first.bottom, second.top
        shared = (Orientation.WEST, Orientation.EAST)

    low, high = lane
    middle = low + (high - low - 1) // 2
    for track, (start, end) in enumerate(zip(starts, ends)):
        points = [(start, exit_at)]
        if start == end:
            points += [(start, along) for along in range(exit_at + 1, entry_at)]
        else:
            # The track on the outside of the bend turns one step later.
            bend = middle + 1 if (end > start) == (track == 0) else middle
            step = 1 if end > start else -1
            points += [(start, along) for along in range(exit_at + 1, bend + 1)]
            points += [(cross, bend) for cross in range(start + step, end + step, step)]
            points += [(end, along) for along in range(bend + 1, entry_at)]
        points.append((end, entry_at))

        cells = [to_cell(*point) for point in points]
        builder.draw_path(cells)
        builder.connect(cells[0], direction_between(cells[0], cells[1]), shared[track])
        builder.connect(cells[-1], direction_between(cells[-1], cells[-2]), shared[track])


def generate_instance(config: GeneratorConfig, seed: int) -> Instance:
    """
    Generate a well-formed instance, deterministic per (config, seed).

    Cities are rings placed on a jittered lattice, filled row by row, and
    every pair of lattice neighbours is joined by a double-track corridor.
    Each train departs from the bottom rail of its start city, circling
    either way, and arrives at the top rail of another city.

    Args:
        config (GeneratorConfig): Size, counts and sampling parameters
        seed (int): 64-bit seed

    Returns:
        Instance: Generated instance
    """
    _check_config(config)
    rng = seeded_generator(seed, GENERATION_STREAM)
    lattice = _plan_lattice(config)

    rings: Dict[Tuple[int, int], _Ring] = {}
    for index in range(config.n_cities):
        row, col = divmod(index, lattice.cols)
        rings[row, col] = _Ring(
            top=lattice.band_top(row) + int(rng.integers(0, lattice.jitter + 1)),
            left=lattice.band_left(col) + int(rng.integers(0, lattice.jitter + 1)),
            width=lattice.ring_width,
        )

    builder = TrackBuilder(config.width, config.height)
    for ring in rings.values():
        builder.draw_loop(ring.loop())
    for (row, col), ring in rings.items():
        east = rings.get((row, col + 1))
        if east is not None:
            _lay_corridor(builder, ring, east, True, lattice.avenue(col))
        south = rings.get((row + 1, col))
        if south is not None:
            _lay_corridor(builder, ring, south, False, lattice.street(row))
    cities = [ring.city() for ring in rings.values()]

    rail_map = builder.build(cities)
    violations = validate_map(rail_map)
    if violations:
        raise GenerationError(f"generated map is malformed: {violations[:3]}")

    tmax = compute_tmax(config.width, config.height, config.n_agents, config.n_cities)
    speeds = np.array([speed for speed, _ in config.speed_mix])
    shares = np.array([share for _, share in config.speed_mix], dtype=float)
    shares = shares / shares.sum()

    trains = []
    for agent in range(config.n_agents):
        start_city = int(rng.integers(config.n_cities))
        goal_city = (start_city + 1 + int(rng.integers(config.n_cities - 1))) % config.n_cities
        cmax = int(rng.choice(speeds, p=shares))
        heading = Orientation.WEST if rng.integers(2) == 0 else Orientation.EAST
        start = RailState(cities[start_city].departure, heading)
        goal = cities[goal_city].arrival

        steps = rail_map.distance(start, goal)
        if steps == UNREACHABLE:
            raise GenerationError(f"train {agent}: goal {goal} unreachable from {start}")
        travel = cmax * int(steps)
        margin = int(rng.integers(0, math.ceil(config.slack_factor * travel) + 1))
        margin = max(0, min(margin, tmax - travel - 1))
        latest_edt = tmax - travel - margin
        if latest_edt < 1:
            raise GenerationError(f"train {agent}: trip of {travel} steps does not fit tmax {tmax}")
        edt = 1 + int(rng.integers(0, int(config.departure_spread * (latest_edt - 1)) + 1))

        trains.append(
            TrainSpec(
                id=agent,
                start=start.cell,
                initial_orientation=start.orientation,
                goal=goal,
                cmax=cmax,
                edt=edt,
                eat=edt + travel + margin,
            )
        )

    instance = Instance(
        map=rail_map,
        trains=tuple(trains),
        tmax=tmax,
        malfunction=config.malfunction,
        seed=seed & _SEED_MASK,
        level=config.level,
        name=f"level{config.level}-seed{seed}" if config.level else f"seed{seed}",
    )
    logger.info(
        "Generated %s: %dx%d, %d trains, %d cities on a %dx%d lattice, tmax %d",
        instance.name, config.width, config.height, config.n_agents, config.n_cities,
        lattice.rows, lattice.cols, tmax,
    )
    return instance


def sample_malfunctions(
    params: MalfunctionParams, agents: int, horizon: int, seed: int
) -> List[List[MalfunctionEvent]]:
    """
    Sample a malfunction schedule.

    Each timestep starts a malfunction with probability 1 - exp(-rate),
    independently per agent, from a stream keyed by (seed, agent). A new
    malfunction never starts before the previous one has ended.

    Args:
        params (MalfunctionParams): Rate and duration range
        agents (int): Number of agents
        horizon (int): Events start strictly before this timestep
        seed (int): 64-bit seed

    Returns:
        list: Per-agent lists of events ordered by start
    """
    probability = -math.expm1(-params.rate)
    schedule = []
    for agent in range(agents):
        events = []
        if probability > 0:
            rng = seeded_generator(seed, MALFUNCTION_STREAM, agent)
            t = 0
            while True:
                t += int(rng.geometric(probability)) - 1
                if t >= horizon:
                    break
                duration = int(rng.integers(params.min_duration, params.max_duration + 1))
                events.append(MalfunctionEvent(agent, t, duration))
                t += duration
        schedule.append(events)
    return schedule


def validate_instance(instance: Instance) -> List[str]:
    """
    Check the instance invariants against its map.

    Returns:
        list: Human-readable problems; empty when the instance is valid
    """
    problems = [f"{v.rule} at {v.cell}: {v.detail}" for v in validate_map(instance.map)]
    rail_map = instance.map
    n_cities = len(rail_map.cities)
    if instance.trains and n_cities:
        expected = compute_tmax(rail_map.width, rail_map.height, len(instance.trains), n_cities)
        if instance.tmax != expected:
            problems.append(f"tmax {instance.tmax} differs from formula value {expected}")

    params = instance.malfunction
    if params.rate < 0 or params.min_duration < 1 or params.min_duration > params.max_duration:
        problems.append(f"invalid malfunction parameters {params}")

    stations = set(rail_map.stations())
    for index, train in enumerate(instance.trains):
        label = f"train {train.id}"
        if train.id != index:
            problems.append(f"{label}: ids must be 0..m-1 in order")
        if not 1 <= train.cmax <= 4:
            problems.append(f"{label}: cmax {train.cmax} outside 1..4")
        if not 0 <= train.edt < train.eat <= instance.tmax:
            problems.append(f"{label}: need 0 <= edt < eat <= tmax, got edt {train.edt}, eat {train.eat}")
        if train.start == train.goal:
            problems.append(f"{label}: start equals goal")
        if train.start not in stations or train.goal not in stations:
            problems.append(f"{label}: start and goal must be station cells")
    return problems
