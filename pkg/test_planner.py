import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import N, W, make_instance, ring_map
from engine.simulator import PlanFollower, run_episode, stop_controller
from models.scenario import GeneratorConfig, generate_instance, level_preset
from planning.planner import (
    DEFAULT_PORTFOLIO,
    PARTIAL_SUFFIX,
    PriorityStrategy,
    Solution,
    order,
    portfolio_plan,
    prioritized_plan,
    validate_solution,
)
from planning.sipp import Visit


def test_orders_on_distinct_slack(ring_instance):
    for strategy in PriorityStrategy:
        assert order(ring_instance, strategy) == [0, 1]


def test_slack_ties_break_on_speed_then_id(bottleneck_instance):
    assert order(bottleneck_instance, PriorityStrategy.BY_SLACK) == [0, 1]
    assert order(bottleneck_instance, PriorityStrategy.BY_SLACK_SLOW_FIRST) == [1, 0]


def test_slower_train_with_more_slack_goes_later(two_route_instance):
    assert order(two_route_instance, PriorityStrategy.BY_EARLIEST_ARRIVAL) == [0, 1]
    assert order(two_route_instance, PriorityStrategy.BY_SLACK) == [0, 1]


def test_unreachable_goals_go_last():
    instance = make_instance(
        ring_map(),
        [
            ((1, 2), N, (3, 2), 1, 1, 10),
            ((3, 2), W, (1, 2), 1, 1, 10),
        ],
    )
    for strategy in [PriorityStrategy.BY_EARLIEST_ARRIVAL, PriorityStrategy.BY_SLACK]:
        assert order(instance, strategy) == [1, 0]
    solution = prioritized_plan(instance, [1, 0])
    assert solution.paths[0] is None
    assert solution.paths[1] is not None


def test_prioritized_plan_on_the_ring(ring_instance):
    solution = prioritized_plan(ring_instance, [0, 1], "index")
    first, second = solution.paths
    assert (first.entry_time, first.planned_arrival) == (1, 5)
    assert (second.entry_time, second.planned_arrival) == (2, 10)
    assert solution.total_delay == 0
    assert solution.reward_estimate == 1.0
    assert solution.makespan == 10
    assert solution.success_count == 2
    assert solution.label == "index"
    assert validate_solution(solution) == []


def test_bottleneck_costs_one_step(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    assert solution.delays == (0, 1)
    assert solution.total_delay == 1


def test_unplanned_agents_are_charged_as_never_entering(ring_instance):
    solution = Solution.from_paths(ring_instance, [None, None])
    assert solution.delays == (90, 80)
    assert solution.planned_count == 0
    result, _ = run_episode(ring_instance, stop_controller)
    assert solution.reward_estimate == pytest.approx(result.reward)


def test_portfolio_prefers_the_earlier_strategy_on_ties(ring_instance):
    assert portfolio_plan(ring_instance).label == DEFAULT_PORTFOLIO[0].value
    chosen = portfolio_plan(ring_instance, [PriorityStrategy.BY_SLACK, PriorityStrategy.BY_INDEX])
    assert chosen.label == "slack"


def test_portfolio_needs_a_strategy(ring_instance):
    with pytest.raises(ValueError):
        portfolio_plan(ring_instance, [])


def test_spent_portfolio_budget_keeps_a_partial_run(bottleneck_instance):
    solution = portfolio_plan(bottleneck_instance, deadline=0)
    assert solution.label == "index" + PARTIAL_SUFFIX
    assert solution.planned_count == 0
    assert validate_solution(solution) == []


def test_prioritized_plan_stops_at_its_deadline(bottleneck_instance, monkeypatch):
    clock = iter([0.0])
    monkeypatch.setattr("planning.planner.time.perf_counter", lambda: next(clock, 2.0))
    solution = prioritized_plan(bottleneck_instance, [0, 1], "slack", deadline=1.0)
    assert solution.label == "slack+partial"
    assert solution.paths[0] is not None
    assert solution.paths[1] is None


def test_portfolio_runs_share_the_time_left(bottleneck_instance, monkeypatch):
    deadlines = []

    def fake_plan(instance, priority, label="", deadline=None):
        deadlines.append(deadline)
        return prioritized_plan(instance, priority, label)

    now = iter(range(100))
    monkeypatch.setattr("planning.planner.time.perf_counter", lambda: float(next(now)))
    monkeypatch.setattr("planning.planner.prioritized_plan", fake_plan)
    strategies = [PriorityStrategy.BY_INDEX, PriorityStrategy.BY_SLACK, PriorityStrategy.BY_EARLIEST_ARRIVAL]
    portfolio_plan(bottleneck_instance, strategies, deadline=10)
    # the clock reads 0 at the start, then twice per run
    assert deadlines == [2 + 9, 4 + 7 / 2, 6 + 5]


def test_validate_solution_reports_problems(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    first = solution.paths[0]

    clash = Solution.from_paths(bottleneck_instance, [first, replace(first, agent=1)])
    assert any("conflict" in p for p in validate_solution(clash))

    early = replace(first, entry_time=0, occupancy=(replace(first.occupancy[0], enter=0),) + first.occupancy[1:])
    problems = validate_solution(Solution.from_paths(bottleneck_instance, [early, None]))
    assert any("before edt" in p for p in problems)

    gap = (Visit((3, 2), W, 1, 3),) + first.occupancy[1:]
    problems = validate_solution(Solution.from_paths(bottleneck_instance, [replace(first, occupancy=gap), None]))
    assert any("leaves at 3" in p for p in problems)

    wrong_turn = (first.occupancy[0], Visit((2, 1), N, 2, 3)) + first.occupancy[2:]
    problems = validate_solution(Solution.from_paths(bottleneck_instance, [replace(first, occupancy=wrong_turn), None]))
    assert any("not a rail successor" in p for p in problems)


def test_replaying_a_plan_earns_its_estimate(ring_instance, bottleneck_instance):
    for instance in [ring_instance, bottleneck_instance]:
        solution = portfolio_plan(instance)
        result, _ = run_episode(instance, PlanFollower(solution.paths))
        assert result.reward == pytest.approx(solution.reward_estimate)
        assert list(result.arrivals) == [p.planned_arrival for p in solution.paths]


def test_generated_instance_plans_without_conflicts():
    instance = generate_instance(GeneratorConfig(width=30, height=30, n_cities=3, n_agents=8), seed=4)
    solution = portfolio_plan(instance)
    assert validate_solution(solution) == []
    result, _ = run_episode(instance, PlanFollower(solution.paths))
    assert result.reward == pytest.approx(solution.reward_estimate)


@pytest.mark.bench
def test_replay_matches_the_plan_on_fifty_instances():
    for seed in range(50):
        instance = generate_instance(GeneratorConfig(width=30, height=30, n_cities=3, n_agents=8), seed=seed)
        solution = portfolio_plan(instance)
        result, _ = run_episode(instance, PlanFollower(solution.paths))
        assert result.reward == pytest.approx(solution.reward_estimate, abs=1e-12), seed
        for path, arrival in zip(solution.paths, result.arrivals):
            assert path is None or arrival == path.planned_arrival, seed


@pytest.mark.bench
def test_level_one_is_fully_planned_within_a_second():
    for seed in range(20):
        instance = generate_instance(level_preset(1), seed=seed)
        started = time.perf_counter()
        solution = portfolio_plan(instance)
        elapsed = time.perf_counter() - started
        assert elapsed < 1.0, (seed, elapsed)
        assert solution.success_count == len(instance.trains) == 7
        result, _ = run_episode(instance, PlanFollower(solution.paths))
        assert result.success_rate == 1.0


@pytest.mark.bench
def test_portfolio_is_never_worse_than_its_strategies():
    for seed in range(30):
        instance = generate_instance(GeneratorConfig(width=40, height=40, n_cities=4, n_agents=24), seed=seed)
        best = min(prioritized_plan(instance, order(instance, s)).total_delay for s in DEFAULT_PORTFOLIO)
        assert portfolio_plan(instance).total_delay <= best


@pytest.mark.bench
def test_slack_order_beats_index_order_on_tight_schedules(record_property):
    config = GeneratorConfig(
        width=40, height=40, n_cities=4, n_agents=30, slack_factor=0.1, departure_spread=0.2,
        speed_mix=((1, 0.25), (2, 0.25), (3, 0.25), (4, 0.25)),
    )
    delays = {PriorityStrategy.BY_INDEX: [], PriorityStrategy.BY_SLACK: []}
    for seed in range(30):
        instance = generate_instance(config, seed=seed)
        for strategy, found in delays.items():
            found.append(prioritized_plan(instance, order(instance, strategy)).total_delay)

    index_mean = float(np.mean(delays[PriorityStrategy.BY_INDEX]))
    slack_mean = float(np.mean(delays[PriorityStrategy.BY_SLACK]))
    record_property("index_mean_delay", index_mean)
    record_property("slack_mean_delay", slack_mean)
    assert slack_mean <= index_mean
