import numpy as np
import pytest

from conftest import E, N, S, W
from engine.simulator import (
    AgentStatus,
    Command,
    EpisodeResult,
    ReplayController,
    command_towards,
    initial_state,
    normalized_reward,
    render_frame,
    resolve_exit,
    run_episode,
    score,
    step,
    stop_controller,
)
from models.scenario import GeneratorConfig, MalfunctionEvent, MalfunctionParams, generate_instance, sample_malfunctions

F = Command.FORWARD


def _place(state, agent, cell, orientation, counter=0):
    runtime = state.agents[agent]
    runtime.status = AgentStatus.ON_MAP
    runtime.position = cell
    runtime.orientation = orientation
    runtime.counter = counter
    runtime.entry_time = 1
    state.occupancy[cell] = agent


def test_command_letters():
    assert Command.from_letter("F") is Command.FORWARD
    assert [c.letter for c in Command] == ["S", "F", "L", "R"]
    for bad in ["FL", "X", ""]:
        with pytest.raises(ValueError):
            Command.from_letter(bad)


def test_nobody_moves_without_commands(ring_instance):
    result, _ = run_episode(ring_instance, stop_controller)
    assert result.steps == ring_instance.tmax
    assert result.arrivals == (None, None)
    # Never entered: tmax plus the full distance, minus eat.
    assert result.delays == (96 + 4 - 10, 96 + 4 - 20)
    assert result.success_count == 0
    assert result.reward == pytest.approx(1 - 170 / (2 * 96))


def test_entry_waits_for_departure_time(ring_instance):
    state = initial_state(ring_instance)
    state = step(state, {1: F})
    assert state.agents[1].status is AgentStatus.OFF_MAP
    state = step(state, {1: F})
    assert state.t == 2
    assert state.agents[1].status is AgentStatus.ON_MAP
    assert state.agents[1].entry_time == 2
    assert state.agents[1].position == (1, 2)
    assert state.occupancy == {(1, 2): 1}


def test_full_speed_train_arrives_after_free_flow_time(ring_instance):
    result, trajectory = run_episode(ring_instance, lambda state, revealed: {0: F}, record=True)
    assert result.arrivals[0] == 5
    assert result.delays[0] == 0
    cells = [r.cell for r in trajectory if r.agent == 0 and r.status is AgentStatus.ON_MAP]
    assert cells == [(3, 2), (3, 1), (2, 1), (1, 1)]


def test_slow_train_needs_cmax_steps_per_cell(ring_instance):
    state = initial_state(ring_instance)
    for _ in range(2):
        state = step(state, {1: F})
    assert state.agents[1].position == (1, 2)
    state = step(state, {1: F})
    assert state.agents[1].position == (1, 2)
    assert state.agents[1].counter == 1
    state = step(state, {1: F})
    assert state.t == 4
    assert state.agents[1].position == (1, 3)
    assert state.agents[1].counter == 0


def test_entries_lose_ties_to_lower_ids_and_can_follow(bottleneck_instance):
    state = step(initial_state(bottleneck_instance), {0: F, 1: F})
    assert state.agents[0].status is AgentStatus.ON_MAP
    assert state.agents[1].status is AgentStatus.OFF_MAP

    result, _ = run_episode(bottleneck_instance, lambda s, revealed: {0: F, 1: F})
    assert result.arrivals == (5, 6)
    assert result.delays == (0, 1)


def test_swaps_are_cancelled(bottleneck_instance):
    state = initial_state(bottleneck_instance)
    _place(state, 0, (3, 2), W)
    _place(state, 1, (3, 1), S)
    nxt = step(state, {0: F, 1: F})
    assert nxt.agents[0].position == (3, 2)
    assert nxt.agents[1].position == (3, 1)
    # The counter stays charged for the next attempt.
    assert nxt.agents[0].counter == 1


def test_stopped_train_blocks_its_cell(bottleneck_instance):
    state = initial_state(bottleneck_instance)
    _place(state, 0, (3, 2), W)
    _place(state, 1, (3, 3), S)
    nxt = step(state, {1: F})
    assert nxt.agents[1].position == (3, 3)
    # Moving out in the same step frees the cell.
    nxt = step(state, {0: F, 1: F})
    assert nxt.agents[0].position == (3, 1)
    assert nxt.agents[1].position == (3, 2)
    assert nxt.agents[1].orientation == W


def test_on_map_move_beats_entry(bottleneck_instance):
    state = initial_state(bottleneck_instance)
    _place(state, 1, (3, 3), S)
    state.t = 3
    nxt = step(state, {0: F, 1: F})
    assert nxt.agents[1].position == (3, 2)
    assert nxt.agents[0].status is AgentStatus.OFF_MAP


def test_malfunction_freezes_and_counts_down(ring_instance):
    schedule = [[MalfunctionEvent(0, 0, 3)], []]
    result, trajectory = run_episode(ring_instance, lambda s, revealed: {0: F}, schedule, record=True)
    lefts = [r.malfunction_left for r in trajectory if r.agent == 0 and r.t >= 1][:4]
    assert lefts == [2, 1, 0, 0]
    entered = [r.t for r in trajectory if r.agent == 0 and r.status is AgentStatus.ON_MAP]
    assert entered[0] == 4
    assert result.arrivals[0] == 8


def test_malfunctions_are_revealed_at_onset(ring_instance):
    schedule = [[MalfunctionEvent(0, 2, 5)], []]
    seen = {}

    def controller(state, revealed):
        seen[state.t] = list(revealed)
        return {0: F}

    run_episode(ring_instance, controller, schedule)
    assert [t for t, events in seen.items() if events] == [2]
    assert seen[2] == [MalfunctionEvent(0, 2, 5)]


def test_commands_for_finished_agents_are_ignored(ring_instance):
    result, _ = run_episode(ring_instance, lambda s, revealed: {0: F, 1: F})
    assert result.success_count == 2
    assert result.ignored_commands > 0


def test_unfinished_agents_are_charged_from_their_position(ring_instance):
    state = initial_state(ring_instance)
    _place(state, 0, (3, 1), W)
    state.t = ring_instance.tmax
    result = score(ring_instance, state)
    assert result.delays[0] == 96 + 3 - 10
    assert result.arrivals[0] is None


def test_normalized_reward_is_clamped():
    assert normalized_reward([0, 0], 2, 10) == 1.0
    assert normalized_reward([1000], 1, 10) == 0.0
    assert normalized_reward([5], 1, 10) == pytest.approx(0.5)
    assert normalized_reward([], 0, 10) == 1.0


def test_success_rate():
    result = EpisodeResult(arrivals=(5, None), delays=(0, 3), success_count=1, reward=0.9, steps=10)
    assert result.success_rate == 0.5
    assert result.total_delay == 3


def test_resolve_exit(two_routes):
    straight = two_routes.mask((1, 2))
    assert resolve_exit(straight, E, Command.LEFT) == E
    assert resolve_exit(straight, E, Command.STOP) is None
    switch = two_routes.mask((1, 3))
    assert resolve_exit(switch, E, Command.FORWARD) == E
    assert resolve_exit(switch, E, Command.RIGHT) == S
    assert resolve_exit(switch, E, Command.LEFT) is None
    assert resolve_exit(straight, N, Command.FORWARD) is None


def test_command_towards():
    assert command_towards(E, (1, 3), (1, 4)) is Command.FORWARD
    assert command_towards(E, (1, 3), (2, 3)) is Command.RIGHT
    assert command_towards(E, (1, 3), (0, 3)) is Command.LEFT
    assert command_towards(E, (1, 3), (1, 2)) is Command.STOP


def test_replay_controller(ring_instance):
    rows = {t: [F, Command.STOP] for t in range(5)}
    result, _ = run_episode(ring_instance, ReplayController(rows))
    assert result.arrivals == (5, None)


def test_controller_failure_aborts_episode(ring_instance):
    def controller(state, revealed):
        if state.t == 3:
            raise RuntimeError("boom")
        return {0: F}

    result, _ = run_episode(ring_instance, controller)
    assert result.aborted
    assert result.steps == 3


def test_render_frame_shows_trains(ring_instance):
    state = step(initial_state(ring_instance), {0: F})
    frame = render_frame(state)
    assert frame.splitlines()[0] == "t=1"
    assert frame.splitlines()[4] == ".#0#."


def _fuzz(seed, steps):
    config = GeneratorConfig(width=30, height=30, n_cities=3, n_agents=10, malfunction=MalfunctionParams(0.05, 2, 6))
    instance = generate_instance(config, seed)
    schedule = sample_malfunctions(instance.malfunction, len(instance.trains), instance.tmax, seed)
    rng = np.random.default_rng(seed)
    state = initial_state(instance, schedule)
    done = 0
    for _ in range(steps):
        commands = {a: Command(int(c)) for a, c in enumerate(rng.integers(0, 4, size=len(instance.trains)))}
        nxt = step(state, commands)
        on_map = [rt for rt in nxt.agents if rt.status is AgentStatus.ON_MAP]
        assert len({rt.position for rt in on_map}) == len(on_map)
        assert len(nxt.occupancy) == len(on_map)
        for agent, (before, after) in enumerate(zip(state.agents, nxt.agents)):
            train = instance.trains[agent]
            assert 0 <= after.counter <= train.cmax
            if after.status is not AgentStatus.OFF_MAP and before.status is AgentStatus.OFF_MAP:
                assert after.entry_time == nxt.t >= train.edt
            if before.status is AgentStatus.ON_MAP and after.status is AgentStatus.ON_MAP:
                other = state.occupancy.get(after.position)
                if other is not None and other != agent and nxt.agents[other].status is AgentStatus.ON_MAP:
                    assert nxt.agents[other].position != before.position, "swap"
        finished = sum(rt.status is AgentStatus.DONE for rt in nxt.agents)
        assert finished >= done
        done = finished
        state = nxt


def test_random_commands_keep_invariants():
    _fuzz(seed=1, steps=300)


@pytest.mark.bench
def test_random_commands_keep_invariants_at_scale():
    for seed in range(50):
        _fuzz(seed, steps=2000)
