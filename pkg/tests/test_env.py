from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abshorizon.env import (
    Action,
    ContractError,
    GridQuest,
    MapError,
    abstract,
    load_map,
    reset,
    step,
    transition,
)

from conftest import fixture_map


def test_minimal_map_has_one_floor_cell():
    spec = load_map("###\n#S#\n###\n\nbucket_size: 1\n")
    floor = [(x, y) for y, row in enumerate(spec.grid) for x, c in enumerate(row) if c != "#"]
    assert floor == [(1, 1)]
    assert spec.start == (1, 1)


def test_unknown_glyph_reports_position():
    with pytest.raises(MapError, match=r"unknown glyph 'Z' at line 2 col 4"):
        load_map("#####\n#S.Z#\n#####\n")


def test_tworoom_counts(tworoom):
    assert tworoom.n_rooms == 2
    assert tworoom.count("abcd") == 1
    assert tworoom.count("ABCD") == 1
    assert tworoom.count("T") == 1


def test_bucket_larger_than_room_rejected():
    with pytest.raises(MapError):
        load_map("#####\n#S..#\n#####\n\nbucket_size: 4\n")


def test_missing_and_duplicate_start():
    with pytest.raises(MapError, match="no start"):
        load_map("###\n#.#\n###\n\nbucket_size: 1\n")
    with pytest.raises(MapError, match="duplicate"):
        load_map("####\n#SS#\n####\n\nbucket_size: 1\n")


def test_reset_at_start(tworoom):
    x = reset(tworoom, seed=0)
    assert x.agent_pos == tworoom.start
    assert x.inventory == 0
    assert x.step_count == 0 and x.alive


def _trace(spec, seed, actions):
    env = GridQuest(spec, seed)
    return [env.step(a)[0] for a in actions]


def test_rollouts_are_deterministic(tworoom):
    acts = list(np.random.default_rng(3).integers(0, 5, size=50))
    assert _trace(tworoom, 0, acts) == _trace(tworoom, 0, acts)


def test_sticky_seeding(tworoom):
    spec = tworoom.with_changes(sticky_prob=0.25)
    acts = list(np.random.default_rng(4).integers(0, 5, size=200))
    assert _trace(spec, 0, acts) == _trace(spec, 0, acts)
    assert _trace(spec, 0, acts) != _trace(spec, 1, acts)


def test_stay_on_floor(tworoom):
    x = reset(tworoom)
    x2, r, done = transition(tworoom, x, Action.STAY)
    assert x2.agent_pos == x.agent_pos and r == 0 and not done


def test_key_pickup(tworoom):
    key_pos = next(p for p, i in tworoom.items.items() if i == 0)
    x = reset(tworoom)._replace(agent_pos=(key_pos[0] - 1, key_pos[1]))
    x2, r, _ = transition(tworoom, x, Action.RIGHT)
    assert x2.inventory & 1
    assert r == 100
    # picking up is one-shot
    x3, r3, _ = transition(tworoom, x2._replace(agent_pos=(key_pos[0] - 1, key_pos[1])), Action.RIGHT)
    assert r3 == 0


def test_locked_door_blocks_without_key(tworoom):
    door = next(iter(tworoom.doors))
    x = reset(tworoom)._replace(agent_pos=(door[0] - 1, door[1]))
    assert transition(tworoom, x, Action.RIGHT)[0].agent_pos == x.agent_pos
    assert transition(tworoom, x._replace(inventory=1), Action.RIGHT)[0].agent_pos == door


def test_fall_into_hazard(falltrap):
    # the left shaft is three cells of fall-zone with a hazard below
    x = reset(falltrap)._replace(agent_pos=(4, 2))
    x, r, done = transition(falltrap, x, Action.DOWN)
    assert x.agent_pos == (4, 3) and x.fall_height > 0 and not done
    rewards = []
    for _ in range(3):
        assert not done
        # the chosen action is ignored while falling
        x, r, done = transition(falltrap, x, Action.UP)
        rewards.append(r)
    assert x.agent_pos == (4, 6)
    assert done and not x.alive
    assert rewards == [0.0, 0.0, falltrap.hazard_reward]


def test_cannot_climb_out_of_fall_zone(falltrap):
    x = reset(falltrap)._replace(agent_pos=(8, 6))
    assert transition(falltrap, x, Action.UP)[0].agent_pos == (8, 6)


def test_step_on_terminal_raises(tworoom):
    x = reset(tworoom)._replace(alive=False)
    with pytest.raises(ContractError):
        transition(tworoom, x, Action.STAY)


def test_abstract_floor_division():
    grid = "#" * 40 + "\n" + ("#S" + "." * 37 + "#\n") + ("#" + "." * 38 + "#\n") * 17 + "#" * 40
    spec = load_map(grid + "\n\nbucket_size: 20\nroom: 40x20\n")
    s = abstract(reset(spec)._replace(agent_pos=(23, 7)), spec)
    assert (s.bx, s.by) == (1, 0)


def test_abstract_ignores_monsters_not_inventory():
    spec = fixture_map("patrol")
    x = reset(spec)
    assert abstract(x, spec) != abstract(x._replace(inventory=1), spec)
    assert abstract(x, spec) == abstract(x._replace(monster_phases=(1,)), spec)


def test_snapshot_restore(tworoom):
    env = GridQuest(tworoom)
    for a in (3, 3, 1):
        env.step(a)
    token = env.snapshot()
    acts = [3, 3, 3, 1, 0, 2, 4, 3, 3, 1]
    first = [env.step(a)[0] for a in acts]
    assert env.restore(token) == token.state
    assert [env.step(a)[0] for a in acts] == first


def test_restore_other_map_rejected(tworoom):
    token = GridQuest(fixture_map("corridor")).snapshot()
    with pytest.raises(ContractError):
        GridQuest(tworoom).restore(token)


def test_frame_counter_and_charge(tworoom):
    env = GridQuest(tworoom)
    env.step(4)
    env.charge(10)
    assert env.frames == 11


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=80), st.integers(0, 3))
def test_agent_never_inside_walls(actions, seed):
    spec = fixture_map("fourroom")
    x = reset(spec)
    rng = np.random.default_rng(seed)
    for a in actions:
        if not x.alive or x.step_count >= spec.horizon:
            break
        x, _, _ = step(spec, x, a, rng)
        cx, cy = x.agent_pos
        assert spec.grid[cy][cx] != "#"
        assert x.inventory >= 0
