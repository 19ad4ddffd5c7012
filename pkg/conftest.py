"""Hand-built maps and small instances shared by the test modules."""
import pytest

from models.railmap import City, Orientation, TrackBuilder
from models.scenario import Instance, MalfunctionParams, TrainSpec, compute_tmax

N, E, S, W = Orientation.NORTH, Orientation.EAST, Orientation.SOUTH, Orientation.WEST

# Eight-cell loop inside a 5x5 grid: a single track with no passing places.
RING = [(1, 1), (1, 2), (1, 3), (2, 3), (3, 3), (3, 2), (3, 1), (2, 1)]

# Outer loop of a 7x5 grid; a chord (1,3) -> (2,3) -> (3,3) shortcuts the east side.
OUTER = [(1, 1), (1, 2), (1, 3), (1, 4), (1, 5), (2, 5), (3, 5), (3, 4), (3, 3), (3, 2), (3, 1), (2, 1)]


def ring_map():
    builder = TrackBuilder(5, 5)
    builder.draw_loop(RING)
    return builder.build([City(arrival=(1, 2), departure=(3, 2))])


def two_route_map():
    builder = TrackBuilder(7, 5)
    builder.draw_loop(OUTER)
    builder.connect((1, 3), W, S)
    builder.connect((2, 3), N, S)
    builder.connect((3, 3), N, E)
    return builder.build([City(arrival=(3, 4), departure=(1, 2))])


def make_instance(rail_map, trains, malfunction=None, seed=0, name="fixture"):
    """
    Build an instance from (start, orientation, goal, cmax, edt, eat) tuples.

    tmax follows the usual formula for the map size and city count.
    """
    specs = tuple(TrainSpec(index, *fields) for index, fields in enumerate(trains))
    tmax = compute_tmax(rail_map.width, rail_map.height, len(specs), len(rail_map.cities))
    return Instance(
        map=rail_map,
        trains=specs,
        tmax=tmax,
        malfunction=malfunction or MalfunctionParams(),
        seed=seed,
        name=name,
    )


@pytest.fixture
def ring():
    return ring_map()


@pytest.fixture
def two_routes():
    return two_route_map()


@pytest.fixture
def ring_instance():
    """Two trains running opposite halves of the ring, both on time when planned."""
    return make_instance(
        ring_map(),
        [
            ((3, 2), W, (1, 2), 1, 1, 10),
            ((1, 2), E, (3, 2), 2, 2, 20),
        ],
        name="ring",
    )


@pytest.fixture
def bottleneck_instance():
    """Two identical trains from the same station; the second must queue behind the first."""
    return make_instance(
        ring_map(),
        [
            ((3, 2), W, (1, 2), 1, 1, 5),
            ((3, 2), W, (1, 2), 1, 1, 5),
        ],
        name="bottleneck",
    )


@pytest.fixture
def two_route_instance():
    return make_instance(
        two_route_map(),
        [
            ((1, 2), E, (3, 4), 1, 1, 5),
            ((1, 2), E, (3, 4), 2, 1, 12),
        ],
        name="two-route",
    )
