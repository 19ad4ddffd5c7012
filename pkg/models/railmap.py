import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from errors import RailMapError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

# Sorts after every finite distance and absorbs arithmetic.
UNREACHABLE = math.inf


class Orientation(IntEnum):
    """Heading of a train inside a cell; also used to name cell sides."""

    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    def opposite(self) -> "Orientation":
        return Orientation((self + 2) % 4)

    def left(self) -> "Orientation":
        return Orientation((self + 3) % 4)

    def right(self) -> "Orientation":
        return Orientation((self + 1) % 4)


_DELTAS = {
    Orientation.NORTH: (-1, 0),
    Orientation.EAST: (0, 1),
    Orientation.SOUTH: (1, 0),
    Orientation.WEST: (0, -1),
}


def step_cell(cell: Cell, orientation: Orientation) -> Cell:
    """Return the neighbour of `cell` in direction `orientation`."""
    dr, dc = _DELTAS[orientation]
    return cell[0] + dr, cell[1] + dc


def direction_between(a: Cell, b: Cell) -> Orientation:
    """Return the heading that takes a train from cell `a` into adjacent cell `b`."""
    for orientation, (dr, dc) in _DELTAS.items():
        if (a[0] + dr, a[1] + dc) == b:
            return orientation
    raise RailMapError(f"cells {a} and {b} are not adjacent")


# Transition masks: nibble per incoming heading (N, E, S, W from the high
# nibble down), bit per outgoing heading (N, E, S, W from the high bit down).
def transition_bit(incoming: int, outgoing: int) -> int:
    return 1 << (15 - (4 * incoming + outgoing))


def outgoing_orientations(mask: int, incoming: int) -> Tuple[Orientation, ...]:
    """Outgoing headings allowed for a train entering a cell with heading `incoming`."""
    return tuple(o for o in Orientation if mask & transition_bit(incoming, o))


def mask_from_table(table: Dict[int, Iterable[int]]) -> int:
    """Encode an {incoming: outgoing headings} table as a 16-bit mask."""
    mask = 0
    for incoming, outs in table.items():
        for out in outs:
            mask |= transition_bit(incoming, out)
    return mask


CANONICAL_RAIL_TYPES = {
    "straight": 0x8020,
    "curve": 0x4002,
    "simple switch": 0x9220,
    "diamond crossing": 0x8421,
    "single slip switch": 0x9621,
    "double slip switch": 0xCC33,
    "tri-symmetrical switch": 0x5603,
    "symmetrical switch": 0x5202,
}


def _rotate(mask: int) -> int:
    rotated = 0
    for incoming in range(4):
        for out in range(4):
            if mask & transition_bit(incoming, out):
                rotated |= transition_bit((incoming + 1) % 4, (out + 1) % 4)
    return rotated


def _mirror(mask: int) -> int:
    # East and west swap places; north and south stay.
    flip = (0, 3, 2, 1)
    mirrored = 0
    for incoming in range(4):
        for out in range(4):
            if mask & transition_bit(incoming, out):
                mirrored |= transition_bit(flip[incoming], flip[out])
    return mirrored


def _build_rail_type_index() -> Dict[int, str]:
    index = {0: "empty"}
    for name, mask in CANONICAL_RAIL_TYPES.items():
        image = mask
        for _ in range(4):
            index.setdefault(image, name)
            index.setdefault(_mirror(image), name)
            image = _rotate(image)
    return index


_RAIL_TYPES = _build_rail_type_index()


def rail_type(mask: int) -> Optional[str]:
    """Name of the rail type a mask encodes, or None if it matches none."""
    return _RAIL_TYPES.get(mask)


@dataclass(frozen=True)
class RailState:
    cell: Cell
    orientation: Orientation


@dataclass(frozen=True)
class City:
    arrival: Cell
    departure: Cell


@dataclass(frozen=True)
class MapViolation:
    cell: Optional[Cell]
    rule: str
    detail: str = ""


@dataclass(frozen=True)
class RailMap:
    """
    Grid rail network.

    `grid` holds one transition mask per cell, row-major. Distance tables are
    computed lazily per goal and cached on the instance; the map itself never
    changes after construction.
    """

    width: int
    height: int
    grid: Tuple[int, ...]
    cities: Tuple[City, ...]
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def mask(self, cell: Cell) -> int:
        return self.grid[cell[0] * self.width + cell[1]]

    def is_traversable(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self.mask(cell) != 0

    def successors(self, state: RailState) -> Tuple[RailState, ...]:
        """
        States reachable by one cell traversal.

        Args:
            state (RailState): Current cell and heading

        Returns:
            tuple: Successor states in heading order (empty at a dead end)
        """
        if not self.is_traversable(state.cell):
            raise RailMapError(f"state off rails: {state.cell}")
        result = []
        for out in outgoing_orientations(self.mask(state.cell), state.orientation):
            nxt = step_cell(state.cell, out)
            if self.in_bounds(nxt):
                result.append(RailState(nxt, out))
        return tuple(result)

    def neighbours(self, cell: Cell) -> set:
        """Distinct cells a train can move to from `cell` under any heading."""
        mask = self.mask(cell)
        found = set()
        for incoming in Orientation:
            for out in outgoing_orientations(mask, incoming):
                nxt = step_cell(cell, out)
                if self.in_bounds(nxt):
                    found.add(nxt)
        return found

    def intersections(self) -> Tuple[Cell, ...]:
        """Cells connected to at least three distinct neighbours."""
        if "intersections" not in self._cache:
            cells = []
            for row in range(self.height):
                for col in range(self.width):
                    if self.grid[row * self.width + col] and len(self.neighbours((row, col))) >= 3:
                        cells.append((row, col))
            self._cache["intersections"] = tuple(cells)
        return self._cache["intersections"]

    def stations(self) -> List[Cell]:
        cells = []
        for city in self.cities:
            cells.extend([city.arrival, city.departure])
        return cells

    def _state_index(self, cell: Cell, orientation: int) -> int:
        return (cell[0] * self.width + cell[1]) * 4 + orientation

    def _predecessor_lists(self) -> List[List[int]]:
        # Reversed (cell, orientation) edges, shared by every goal's search.
        if "predecessors" not in self._cache:
            preds: List[List[int]] = [[] for _ in range(self.width * self.height * 4)]
            for row in range(self.height):
                for col in range(self.width):
                    mask = self.grid[row * self.width + col]
                    if not mask:
                        continue
                    for incoming in range(4):
                        for out in outgoing_orientations(mask, incoming):
                            nxt = step_cell((row, col), out)
                            if self.in_bounds(nxt):
                                preds[self._state_index(nxt, out)].append(
                                    self._state_index((row, col), incoming)
                                )
            self._cache["predecessors"] = preds
        return self._cache["predecessors"]

    def distance_table(self, goal: Cell) -> np.ndarray:
        """
        Backward breadth-first search from every heading at `goal`.

        Args:
            goal (Cell): Target cell

        Returns:
            np.ndarray: int32 array of shape (height, width, 4); -1 where unreachable
        """
        key = ("distance", goal)
        table = self._cache.get(key)
        if table is not None:
            return table

        preds = self._predecessor_lists()
        flat = [-1] * (self.width * self.height * 4)
        queue = deque()
        for orientation in range(4):
            index = self._state_index(goal, orientation)
            flat[index] = 0
            queue.append(index)

        while queue:
            index = queue.popleft()
            next_distance = flat[index] + 1
            for pred in preds[index]:
                if flat[pred] < 0:
                    flat[pred] = next_distance
                    queue.append(pred)

        table = np.asarray(flat, dtype=np.int32).reshape(self.height, self.width, 4)
        table.setflags(write=False)
        self._cache[key] = table
        return table

    def distance(self, state: RailState, goal: Cell) -> float:
        """Cell traversals from `state` to `goal`, or UNREACHABLE."""
        if not self.in_bounds(state.cell):
            raise RailMapError(f"state off rails: {state.cell}")
        value = int(self.distance_table(goal)[state.cell[0], state.cell[1], int(state.orientation)])
        return UNREACHABLE if value < 0 else value

    def shortest_route(self, state: RailState, goal: Cell) -> List[RailState]:
        """
        One free-flow shortest route, following the distance table downhill.

        Returns:
            list: States from `state` to the first state on `goal`; empty if unreachable
        """
        remaining = self.distance(state, goal)
        if remaining == UNREACHABLE:
            return []
        route = [state]
        current = state
        while current.cell != goal:
            for nxt in self.successors(current):
                if self.distance(nxt, goal) == remaining - 1:
                    current = nxt
                    remaining -= 1
                    break
            route.append(current)
        return route

    def render(self, markers: Optional[Dict[Cell, str]] = None) -> str:
        """Plain-text frame: '.' empty, '#' track, 'A'/'D' stations, plus markers."""
        markers = markers or {}
        arrivals = {city.arrival for city in self.cities}
        departures = {city.departure for city in self.cities}
        lines = []
        for row in range(self.height):
            chars = []
            for col in range(self.width):
                cell = (row, col)
                if cell in markers:
                    chars.append(markers[cell][0])
                elif cell in arrivals:
                    chars.append("A")
                elif cell in departures:
                    chars.append("D")
                elif self.grid[row * self.width + col]:
                    chars.append("#")
                else:
                    chars.append(".")
            lines.append("".join(chars))
        return "\n".join(lines)


def successors(rail_map: RailMap, state: RailState) -> Tuple[RailState, ...]:
    return rail_map.successors(state)


def distance(rail_map: RailMap, state: RailState, goal: Cell) -> float:
    return rail_map.distance(state, goal)


def validate_map(rail_map: RailMap) -> List[MapViolation]:
    """
    Check every RailMap invariant.

    Args:
        rail_map (RailMap): Map to check

    Returns:
        list: One MapViolation per broken rule and cell; empty when the map is well formed
    """
    violations = []

    if len(rail_map.grid) != rail_map.width * rail_map.height:
        return [MapViolation(None, "grid size", f"{len(rail_map.grid)} cells for {rail_map.width}x{rail_map.height}")]

    for row in range(rail_map.height):
        for col in range(rail_map.width):
            cell = (row, col)
            mask = rail_map.mask(cell)
            if not mask:
                continue
            if rail_type(mask) is None:
                violations.append(MapViolation(cell, "unknown rail type", f"mask {mask:04x}"))

            broken = []
            for incoming in Orientation:
                for out in outgoing_orientations(mask, incoming):
                    nxt = step_cell(cell, out)
                    if not rail_map.in_bounds(nxt) or not outgoing_orientations(rail_map.mask(nxt), out):
                        broken.append(f"{incoming.name}->{out.name}")
            if broken:
                violations.append(MapViolation(cell, "reciprocity", ", ".join(broken)))

    if not rail_map.cities:
        violations.append(MapViolation(None, "cities", "map has no cities"))
    for station in rail_map.stations():
        if not rail_map.is_traversable(station):
            violations.append(MapViolation(station, "station", "station cell is not traversable"))

    return violations


class TrackBuilder:
    """
    Draws track as side-to-side connections and turns them into masks.

    A connection between sides a and b lets a train entering through a leave
    through b and vice versa.
    """

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.connections: Dict[Cell, set] = {}

    def connect(self, cell: Cell, side_a: Orientation, side_b: Orientation):
        if side_a == side_b:
            raise RailMapError(f"cannot connect side {side_a.name} to itself at {cell}")
        self.connections.setdefault(cell, set()).add(frozenset((side_a, side_b)))

    def draw_loop(self, cells: List[Cell]):
        """Connect a closed sequence of pairwise adjacent cells."""
        count = len(cells)
        for i, cell in enumerate(cells):
            prev_cell = cells[i - 1]
            next_cell = cells[(i + 1) % count]
            self.connect(cell, direction_between(cell, prev_cell), direction_between(cell, next_cell))

    def draw_path(self, cells: List[Cell]):
        """Connect the inner cells of an open sequence; the two end cells are left to the caller."""
        for i in range(1, len(cells) - 1):
            cell = cells[i]
            self.connect(cell, direction_between(cell, cells[i - 1]), direction_between(cell, cells[i + 1]))

    def mask_at(self, cell: Cell) -> int:
        mask = 0
        for pair in self.connections.get(cell, ()):
            side_a, side_b = tuple(pair)
            # Entering through side a means heading away from it.
            mask |= transition_bit(side_a.opposite(), side_b)
            mask |= transition_bit(side_b.opposite(), side_a)
        return mask

    def build(self, cities: Iterable[City]) -> RailMap:
        grid = [0] * (self.width * self.height)
        for cell in self.connections:
            grid[cell[0] * self.width + cell[1]] = self.mask_at(cell)
        return RailMap(self.width, self.height, tuple(grid), tuple(cities))
