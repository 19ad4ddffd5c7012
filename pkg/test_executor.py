import numpy as np
import pytest

from engine.simulator import AgentStatus, initial_state, step
from execution.executor import (
    ReplanConfig,
    ReplanMode,
    build_mcp,
    mcp_commands,
    partial_replan,
    project,
    replan_scope,
    run_controller,
)
from models.scenario import (
    GeneratorConfig,
    MalfunctionEvent,
    MalfunctionParams,
    generate_instance,
    level_preset,
    sample_malfunctions,
)
from planning.lns import LnsRun
from planning.planner import portfolio_plan, prioritized_plan

LATE_START = [[MalfunctionEvent(0, 0, 3)], []]


def test_replan_instants():
    assert ReplanConfig(runs=4).instants(96) == {24, 48, 72, 96}
    assert ReplanConfig(runs=3).instants(10) == {3, 6, 10}
    assert ReplanConfig(runs=0).instants(96) == set()


def test_replan_config_validation():
    with pytest.raises(ValueError):
        ReplanConfig(runs=-1)
    with pytest.raises(ValueError):
        ReplanConfig(iterations=-5)
    config = ReplanConfig.from_settings(ReplanMode.MCP_ONLY)
    assert (config.runs, config.iterations, config.mode) == (20, 20, ReplanMode.MCP_ONLY)


def test_visit_order_follows_planned_enter_times(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    mcp = build_mcp(solution)
    assert mcp.visits[(3, 2)] == [(0, 0), (1, 0)]
    # The goal cell is recorded as the visit after the last record.
    assert mcp.visits[(1, 2)] == [(0, 4), (1, 4)]
    assert mcp.predecessor((3, 2), (1, 0)) == (0, 0)
    assert mcp.predecessor((3, 2), (0, 0)) is None
    assert mcp.cursor == [-1, -1]


def test_follower_waits_for_its_predecessor(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    state = initial_state(bottleneck_instance)
    state.t = 1
    state.agents[0].malfunction_left = 2
    commands = mcp_commands(state, build_mcp(solution), solution)
    assert commands[0].letter == "S"
    assert commands[1].letter == "S"


@pytest.mark.parametrize("fixture", ["ring_instance", "bottleneck_instance", "two_route_instance"])
def test_execution_without_malfunctions_matches_the_plan(fixture, request):
    instance = request.getfixturevalue(fixture)
    solution = portfolio_plan(instance)
    result, _ = run_controller(instance, solution, ReplanConfig(mode=ReplanMode.MCP_ONLY))
    assert list(result.arrivals) == [path.planned_arrival for path in solution.paths]
    assert result.reward == pytest.approx(solution.reward_estimate)


def test_projection_without_disturbance_keeps_the_plan(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    projected = project(initial_state(bottleneck_instance), solution, build_mcp(solution))
    assert projected.paths == solution.paths
    assert projected.total_delay == solution.total_delay


def test_projection_propagates_a_malfunction(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    state = initial_state(bottleneck_instance)
    state.agents[0].malfunction_left = 3
    projected = project(state, solution, build_mcp(solution))
    first, second = projected.paths
    assert (first.entry_time, first.planned_arrival) == (4, 8)
    assert (second.entry_time, second.planned_arrival) == (5, 9)
    assert projected.total_delay == 7


def test_partial_replan_returns_inputs_when_nothing_to_gain(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    state = initial_state(bottleneck_instance)
    mcp = build_mcp(solution)
    rng = np.random.default_rng(0)
    assert partial_replan(state, solution, mcp, 0, rng) == (solution, mcp)
    kept, kept_mcp = partial_replan(state, solution, mcp, 10, rng)
    assert kept is solution and kept_mcp is mcp


def test_partial_replan_reorders_around_a_malfunction(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    state = initial_state(bottleneck_instance)
    state.agents[0].malfunction_left = 3
    improved, mcp = partial_replan(state, solution, build_mcp(solution), 20, np.random.default_rng(0))
    assert improved.total_delay == 3
    assert mcp.visits[(3, 2)] == [(1, 0), (0, 0)]


def test_partial_replan_focuses_on_newly_delayed_agents(bottleneck_instance, monkeypatch):
    scopes = []
    original = LnsRun.run

    def spy(self, solution, scope=None):
        scopes.append(scope)
        return original(self, solution, scope)

    monkeypatch.setattr(LnsRun, "run", spy)
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    state = initial_state(bottleneck_instance)
    state.agents[0].malfunction_left = 3
    partial_replan(state, solution, build_mcp(solution), 20, np.random.default_rng(0))
    assert [scope.focus for scope in scopes] == [frozenset({0, 1})]


def test_replan_scope_of_a_running_episode(ring_instance):
    solution = portfolio_plan(ring_instance)
    mcp = build_mcp(solution)
    state = initial_state(ring_instance)
    for _ in range(3):
        state = step(state, mcp_commands(state, mcp, solution))
    mcp.sync(state, solution)
    scope = replan_scope(state, solution, mcp)
    assert scope.now == 3
    assert state.agents[0].status is AgentStatus.ON_MAP
    override = scope.overrides[0]
    assert override.state.cell == (2, 1)
    assert override.entry_time == 1
    assert [v.cell for v in scope.prefixes[0]] == [(3, 2), (3, 1)]
    assert scope.frozen == frozenset()
    assert scope.focus == frozenset()


def test_malfunction_costs_less_with_replanning(bottleneck_instance):
    baseline, _ = run_controller(bottleneck_instance, prioritized_plan(bottleneck_instance, [0, 1]),
                                 ReplanConfig(mode=ReplanMode.MCP_ONLY), LATE_START)
    replanned, _ = run_controller(bottleneck_instance, prioritized_plan(bottleneck_instance, [0, 1]),
                                  ReplanConfig(mode=ReplanMode.PER_MALFUNCTION_PR), LATE_START)
    assert baseline.arrivals == (8, 9)
    assert baseline.total_delay == 7
    assert replanned.arrivals == (8, 5)
    assert replanned.total_delay == 3
    assert replanned.replans == 1
    assert baseline.replans == 0


def test_no_replan_runs_equals_mcp_only(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    mcp_only, _ = run_controller(bottleneck_instance, solution, ReplanConfig(mode=ReplanMode.MCP_ONLY), LATE_START)
    no_runs, _ = run_controller(
        bottleneck_instance, solution, ReplanConfig(runs=0, mode=ReplanMode.LNS_PR), LATE_START
    )
    assert no_runs.arrivals == mcp_only.arrivals
    assert no_runs.reward == mcp_only.reward
    assert no_runs.replans == 0


def test_periodic_replanning_fires_at_its_instants(bottleneck_instance):
    solution = prioritized_plan(bottleneck_instance, [0, 1])
    config = ReplanConfig(runs=bottleneck_instance.tmax, iterations=5, mode=ReplanMode.LNS_PR)
    result, _ = run_controller(bottleneck_instance, solution, config, LATE_START)
    assert not result.aborted
    # Instants 1, 2, ... up to the last step before everyone is done.
    assert result.replans == result.steps - 1
    assert result.total_delay <= 7


@pytest.mark.parametrize("mode", list(ReplanMode))
def test_generated_episode_with_malfunctions(mode):
    params = MalfunctionParams(rate=0.01, min_duration=5, max_duration=15)
    instance = generate_instance(
        GeneratorConfig(width=30, height=30, n_cities=3, n_agents=10, malfunction=params), seed=6
    )
    schedule = sample_malfunctions(instance.malfunction, len(instance.trains), instance.tmax, seed=6)
    solution = portfolio_plan(instance)
    result, _ = run_controller(instance, solution, ReplanConfig(runs=5, iterations=5, mode=mode), schedule, seed=6)
    assert not result.aborted
    assert result.steps <= instance.tmax


@pytest.mark.bench
def test_mcp_brings_every_train_home_despite_malfunctions():
    params = MalfunctionParams(rate=0.02, min_duration=10, max_duration=50)
    for seed in range(20):
        instance = generate_instance(level_preset(1, params), seed=seed)
        solution = portfolio_plan(instance)
        assert solution.planned_count == len(instance.trains)
        horizon = 4 * instance.tmax
        schedule = sample_malfunctions(instance.malfunction, len(instance.trains), horizon, seed=seed)
        result, _ = run_controller(
            instance, solution, ReplanConfig(mode=ReplanMode.MCP_ONLY), schedule, seed=seed, horizon=horizon
        )
        assert not result.aborted
        assert result.success_rate == 1.0, seed


@pytest.mark.bench
def test_scheduled_replanning_keeps_up_with_the_baselines(record_property):
    params = MalfunctionParams(rate=0.02, min_duration=10, max_duration=50)
    config = GeneratorConfig(width=40, height=40, n_cities=4, n_agents=20, malfunction=params)
    totals = {mode: [] for mode in ReplanMode}
    for seed in range(30):
        instance = generate_instance(config, seed=seed)
        solution = portfolio_plan(instance)
        schedule = sample_malfunctions(instance.malfunction, len(instance.trains), instance.tmax, seed=seed)
        for mode, found in totals.items():
            result, _ = run_controller(instance, solution, ReplanConfig(20, 20, mode), schedule, seed=seed)
            found.append(result.total_delay)

    means = {mode: float(np.mean(found)) for mode, found in totals.items()}
    for mode, mean in means.items():
        record_property(f"mean_delay.{mode.value}", mean)
    assert means[ReplanMode.LNS_PR] <= 1.02 * means[ReplanMode.MCP_ONLY]
    assert means[ReplanMode.LNS_PR] <= 1.05 * means[ReplanMode.PER_MALFUNCTION_PR]
