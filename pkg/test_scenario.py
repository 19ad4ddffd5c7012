from dataclasses import replace

import pytest

from conftest import E, make_instance, ring_map
from errors import GenerationError
from models.railmap import UNREACHABLE, Orientation, RailMap, RailState, validate_map
from models.scenario import (
    GeneratorConfig,
    MalfunctionParams,
    TrainSpec,
    compute_tmax,
    generate_instance,
    get_level_presets,
    level_preset,
    sample_malfunctions,
    seeded_generator,
    validate_instance,
)


@pytest.mark.parametrize(
    "width,height,agents,cities,expected",
    [
        (30, 30, 7, 2, 508),
        (158, 158, 425, 41, 2610),
        (5, 5, 2, 1, 96),
        (20, 20, 3, 7, 323),
    ],
)
def test_compute_tmax(width, height, agents, cities, expected):
    assert compute_tmax(width, height, agents, cities) == expected


def test_level_endpoints():
    first = level_preset(1)
    last = level_preset(15)
    assert (first.width, first.height, first.n_agents, first.n_cities) == (30, 30, 7, 2)
    assert (last.width, last.height, last.n_agents, last.n_cities) == (158, 158, 425, 41)
    assert compute_tmax(first.width, first.height, first.n_agents, first.n_cities) == 508
    assert compute_tmax(last.width, last.height, last.n_agents, last.n_cities) == 2610


def test_level_presets_grow_monotonically():
    presets = get_level_presets()
    assert sorted(presets) == list(range(1, 16))
    sizes = [(p.width, p.n_agents, p.n_cities) for _, p in sorted(presets.items())]
    assert sizes == sorted(sizes)
    assert all(p.level == level for level, p in presets.items())


@pytest.mark.parametrize("level", [0, 16])
def test_level_outside_range(level):
    with pytest.raises(GenerationError):
        level_preset(level)


def test_seeded_generator_is_stable_per_stream():
    a = seeded_generator(7, 0).integers(0, 1 << 30, size=5)
    b = seeded_generator(7, 0).integers(0, 1 << 30, size=5)
    c = seeded_generator(7, 1).integers(0, 1 << 30, size=5)
    assert list(a) == list(b)
    assert list(a) != list(c)


def _small_config(**overrides):
    values = dict(width=30, height=30, n_cities=3, n_agents=6)
    values.update(overrides)
    return GeneratorConfig(**values)


def test_generated_instance_is_valid():
    instance = generate_instance(_small_config(), seed=11)
    assert validate_instance(instance) == []
    assert validate_map(instance.map) == []
    assert len(instance.trains) == 6
    assert len(instance.map.cities) == 3
    assert instance.tmax == compute_tmax(30, 30, 6, 3)
    assert instance.name == "seed11"


def test_generated_schedules_are_attainable():
    instance = generate_instance(_small_config(n_agents=12), seed=5)
    for train in instance.trains:
        steps = instance.free_flow_distance(train.id)
        assert train.edt >= 1
        assert train.edt + train.cmax * steps <= train.eat <= instance.tmax
        assert 1 <= train.cmax <= 4


def test_generation_is_deterministic_per_seed():
    config = _small_config()
    assert generate_instance(config, 3) == generate_instance(config, 3)
    assert generate_instance(config, 3).trains != generate_instance(config, 4).trains


def test_level_one_generates():
    instance = generate_instance(level_preset(1), seed=0)
    assert (instance.map.width, len(instance.trains), len(instance.map.cities), instance.tmax) == (30, 7, 2, 508)
    assert instance.level == 1
    assert instance.name == "level1-seed0"
    assert validate_instance(instance) == []


def test_single_speed_mix():
    instance = generate_instance(_small_config(speed_mix=((3, 1.0),)), seed=2)
    assert {train.cmax for train in instance.trains} == {3}


@pytest.mark.parametrize(
    "overrides",
    [
        dict(width=10),
        dict(n_cities=1),
        dict(n_agents=0),
        dict(speed_mix=((5, 1.0),)),
        dict(speed_mix=((1, 0.5), (2, 0.4))),
        dict(malfunction=MalfunctionParams(0.1, 20, 10)),
        dict(n_cities=40),
        dict(city_length=2),
    ],
)
def test_invalid_configs_raise(overrides):
    with pytest.raises(GenerationError):
        generate_instance(_small_config(**overrides), seed=0)


def test_no_malfunctions_at_rate_zero():
    assert sample_malfunctions(MalfunctionParams(), 4, 500, seed=1) == [[], [], [], []]


def test_malfunction_schedule_shape():
    params = MalfunctionParams(rate=0.02, min_duration=10, max_duration=50)
    schedule = sample_malfunctions(params, 5, 400, seed=9)
    assert len(schedule) == 5
    assert any(schedule)
    for agent, events in enumerate(schedule):
        for event in events:
            assert event.agent == agent
            assert 0 <= event.start < 400
            assert 10 <= event.duration <= 50
        for earlier, later in zip(events, events[1:]):
            assert later.start >= earlier.start + earlier.duration


def test_malfunctions_are_keyed_per_agent():
    params = MalfunctionParams(rate=0.02)
    five = sample_malfunctions(params, 5, 400, seed=9)
    three = sample_malfunctions(params, 3, 400, seed=9)
    assert five[:3] == three
    assert sample_malfunctions(params, 5, 400, seed=9) == five


def test_validate_instance_reports_problems():
    instance = make_instance(ring_map(), [((3, 2), E, (1, 2), 1, 1, 10)])
    assert validate_instance(instance) == []

    bad_train = TrainSpec(0, (3, 2), E, (3, 2), 5, 10, 5)
    problems = validate_instance(replace(instance, trains=(bad_train,)))
    assert any("cmax 5" in p for p in problems)
    assert any("edt 10" in p for p in problems)
    assert any("start equals goal" in p for p in problems)

    assert any("tmax" in p for p in validate_instance(replace(instance, tmax=50)))

    off_station = TrainSpec(0, (2, 1), E, (1, 2), 1, 1, 10)
    assert any("station" in p for p in validate_instance(replace(instance, trains=(off_station,))))


def _footprint(city, city_length=4):
    rows = range(city.arrival[0], city.departure[0] + 1)
    cols = range(city.arrival[1] - city_length, city.arrival[1] + 2)
    return {(row, col) for row in rows for col in cols}


def _second_route_exists(rail_map, origin, target):
    route = rail_map.shortest_route(RailState(origin.departure, Orientation.WEST), target.arrival)
    corridor = {state.cell for state in route} - _footprint(origin) - _footprint(target)
    assert corridor

    grid = list(rail_map.grid)
    for row, col in corridor:
        grid[row * rail_map.width + col] = 0
    pruned = RailMap(rail_map.width, rail_map.height, tuple(grid), rail_map.cities)
    return pruned.distance(RailState(origin.departure, Orientation.EAST), target.arrival) != UNREACHABLE


def test_cities_sit_on_a_lattice():
    instance = generate_instance(_small_config(n_cities=4, n_agents=4), seed=3)
    arrivals = [city.arrival for city in instance.map.cities]
    # Filled row by row on a 2x2 lattice.
    assert arrivals[0][0] < arrivals[2][0] and arrivals[1][0] < arrivals[3][0]
    assert arrivals[0][1] < arrivals[1][1] and arrivals[2][1] < arrivals[3][1]
    for city in instance.map.cities:
        assert city.departure == (city.arrival[0] + 3, city.arrival[1])
    assert {train.initial_orientation for train in instance.trains} <= {Orientation.WEST, Orientation.EAST}


@pytest.mark.parametrize("origin,target", [(0, 1), (1, 0), (0, 2), (2, 0), (1, 3), (3, 2)])
def test_neighbouring_cities_are_joined_by_two_disjoint_tracks(origin, target):
    instance = generate_instance(_small_config(n_cities=4, n_agents=4), seed=3)
    cities = instance.map.cities
    assert _second_route_exists(instance.map, cities[origin], cities[target])


def test_level_fifteen_has_double_track_corridors():
    instance = generate_instance(level_preset(15), seed=0)
    assert validate_instance(instance) == []
    cities = instance.map.cities
    # Seven cities per lattice row: 0-1 are east-west neighbours, 0-7 north-south.
    assert _second_route_exists(instance.map, cities[0], cities[1])
    assert _second_route_exists(instance.map, cities[7], cities[0])
