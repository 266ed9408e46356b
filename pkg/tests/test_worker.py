from __future__ import annotations

import numpy as np
import pytest

from abshorizon.amodel import AbstractModel, TransitionKey
from abshorizon.env import Action, GridQuest, abstract, transition
from abshorizon.skills import Featurizer, LearnerConfig, Skill
from abshorizon.worker import PreconditionError, SkillInventory, SubtaskOutcome, Worker

from conftest import fixture_map


def _const_skill(spec, action: int, blind=True) -> Skill:
    """A frozen skill whose greedy action is always ``action``."""
    s = Skill(Featurizer(spec, blind), LearnerConfig(), np.random.default_rng(0))
    s.qfunc.adv[:, action] = 1.0
    s.freeze()
    return s


def _setup(name, seed=0):
    spec = fixture_map(name)
    env = GridQuest(spec)
    s0 = env.abstract()
    return spec, env, AbstractModel(s0), Worker(spec, rng=np.random.default_rng(seed))


def _candidate(model, src, dst):
    key = TransitionKey(src, dst)
    model.add_candidates([[src, dst]])
    return key


def _learn_until_reliable(env, model, worker, key, limit=1500):
    n = 0
    while key not in model.actions and n < limit:
        env.reset()
        worker.learn(env, key, env.state, model)
        n += 1
    return n


def test_hold_four_steps_succeeds():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    key = _candidate(model, s0, s0._replace(bx=1))
    # start one cell left of the destination bucket
    env.restore(env.snapshot()._replace(state=env.state._replace(agent_pos=(3, 1))))
    out = worker.run_skill(env, _const_skill(spec, Action.RIGHT), key, 30, learn=False)
    assert out.success
    assert out.intrinsic_sum == 4
    assert out.steps_used == 4


def test_falling_through_air_bucket_fails(falltrap):
    env = GridQuest(falltrap)
    x, _, _ = transition(falltrap, env.state._replace(agent_pos=(7, 1)), Action.RIGHT)
    env.restore(env.snapshot()._replace(state=x))
    src = abstract(x, falltrap)
    key = TransitionKey(src, src._replace(by=1))
    worker = Worker(falltrap)
    out = worker.run_skill(env, _const_skill(falltrap, Action.STAY), key, 30, learn=False)
    # two forced steps inside the air bucket, then the fall carries the agent out
    assert out.intrinsic_sum == 2
    assert not out.success


def test_subtask_horizon_scales_with_distance():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    model.add_candidates([[s0, s0._replace(bx=1), s0._replace(bx=2), s0._replace(bx=3)]])
    assert worker.horizon(model, TransitionKey(s0, s0._replace(bx=3))) == 90


def test_learn_requires_source_state():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    key = _candidate(model, s0._replace(bx=1), s0._replace(bx=2))
    with pytest.raises(PreconditionError):
        worker.learn(env, key, env.state, model)


def test_traverse_requires_frozen_skill():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    key = _candidate(model, s0, s0._replace(bx=1))
    with pytest.raises(PreconditionError):
        worker.traverse(env, key, model)
    worker.learn(env, key, env.state, model)
    with pytest.raises(PreconditionError):
        worker.traverse(env, key, model)


def test_corridor_blind_skill_suffices():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    key = _candidate(model, s0, s0._replace(bx=1))
    n = _learn_until_reliable(env, model, worker, key)
    assert key in model.actions, n
    assert worker.skill_for(key).blind and worker.skill_for(key).frozen
    assert worker.escalations == 0


def test_corridor_skill_reused_on_next_bucket():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    first = _candidate(model, s0, s0._replace(bx=1))
    _learn_until_reliable(env, model, worker, first)
    second = _candidate(model, s0._replace(bx=1), s0._replace(bx=2))
    env.reset()
    worker.traverse(env, first, model, record=False)
    worker.learn(env, second, env.state, model)
    assert worker.reuse_count == 1
    assert worker.inventory.index[second] == worker.inventory.index[first]
    assert len(worker.inventory) == 1


def test_patrol_blind_skill_escalates():
    spec, env, model, worker = _setup("patrol")
    s0 = env.abstract()
    key = _candidate(model, s0, s0._replace(bx=1))
    n = _learn_until_reliable(env, model, worker, key)
    assert worker.escalations == 1
    assert n > worker.params.blind_budget
    assert key in model.actions
    assert not worker.skill_for(key).blind


def test_distance_two_spawns_full_skill():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    key = _candidate(model, s0, s0._replace(bx=2))
    model.candidates[key].distance = 2
    worker.learn(env, key, env.state, model)
    assert not worker.skill_for(key).blind


def test_empty_inventory_reuses_nothing():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    key = _candidate(model, s0, s0._replace(bx=1))
    assert worker.try_reuse(env, key, SkillInventory(), model, lambda: True) is None


def test_ninety_percent_skill_not_reused(tworoom):
    spec = tworoom.with_changes(sticky_prob=0.25)
    env = GridQuest(spec)
    s0 = env.abstract()
    model = AbstractModel(s0)
    key = _candidate(model, s0, s0._replace(bx=1))
    worker = Worker(spec)
    inv = SkillInventory([_const_skill(spec, Action.RIGHT)])
    outcomes = iter([True] * 90 + [False] * 10)

    def fake_run(env, skill, key, horizon, learn):
        return SubtaskOutcome(next(outcomes), 0.0, 0.0, 1)

    worker.run_skill = fake_run
    assert worker.try_reuse(env, key, inv, model, lambda: True) is None


def test_traverse_records_attempts_and_memo_is_exact():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    key = _candidate(model, s0, s0._replace(bx=1))
    _learn_until_reliable(env, model, worker, key)
    before = len(model.candidates[key].window)
    results = []
    for memo in (False, True, True):
        worker.memo_enabled = memo
        env.reset()
        f0 = env.frames
        out = worker.traverse(env, key, model)
        results.append((out.success, out.steps_used, env.state, env.frames - f0))
    assert results[0] == results[1] == results[2]
    assert len(model.candidates[key].window) == min(before + 3, model.params.n_transition)


def test_demoted_shared_skill_not_offered_again():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    first = _candidate(model, s0, s0._replace(bx=1))
    _learn_until_reliable(env, model, worker, first)
    second = _candidate(model, s0._replace(bx=1), s0._replace(bx=2))
    env.reset()
    worker.traverse(env, first, model, record=False)
    worker.learn(env, second, env.state, model)
    pos = worker.inventory.index[second]
    for _ in range(100):
        model.record_attempt(second, True)
    for _ in range(10):
        model.record_attempt(second, False)
        worker._handle_demotions(model)
    assert second not in worker.inventory.index
    assert worker.rejected[second] == {pos}
    # the shared skill keeps serving the first key, and is skipped for the second
    assert first in model.actions and worker.skill_for(first).frozen
    env.reset()
    worker.traverse(env, first, model, record=False)
    assert worker.try_reuse(env, second, worker.inventory, model, lambda: True) is None


def test_successful_traversal_archives_arrival():
    spec, env, model, worker = _setup("corridor")
    s0 = env.abstract()
    key = _candidate(model, s0, s0._replace(bx=1))
    _learn_until_reliable(env, model, worker, key)
    worker.arrivals.clear()
    for _ in range(2):
        env.reset()
        assert worker.traverse(env, key, model, record=False).success
    assert list(worker.arrivals[key.dst].values()) == [env.state]


def test_arrival_archive_keeps_earliest_and_caps():
    spec, env, model, worker = _setup("corridor")
    x = env.state._replace(agent_pos=(5, 1))
    worker.note_arrival(x._replace(step_count=9))
    worker.note_arrival(x._replace(step_count=4))
    worker.note_arrival(x._replace(step_count=6))
    s = abstract(x, spec)
    assert [a.step_count for a in worker.arrivals[s].values()] == [4]
    worker.arrivals_per_state = 2
    worker.note_arrival(x._replace(agent_pos=(6, 1)))
    worker.note_arrival(x._replace(agent_pos=(7, 1)))
    assert len(worker.arrivals[s]) == 2


def _shared_left_key(name="corridor"):
    """A reliable rightward key served by a constant-right skill, plus a leftward key handed the same skill."""
    spec, env, model, worker = _setup(name)
    s0 = env.abstract()
    right = _candidate(model, s0, s0._replace(bx=1))
    left = _candidate(model, s0._replace(bx=1), s0)
    worker.inventory.skills.append(_const_skill(spec, Action.RIGHT))
    worker._assign(right, 0, model)
    for _ in range(100):
        model.record_attempt(right, True)
    worker._assign(left, 0, model)
    return spec, env, model, worker, right, left


def _learn_left(env, model, worker, right, left):
    env.reset()
    assert worker.traverse(env, right, model, record=False).success
    return worker.learn(env, left, env.state, model)


def test_failing_reused_skill_is_taken_off_the_key():
    spec, env, model, worker, right, left = _shared_left_key()
    allowed = int(model.params.delta * model.params.n_transition)
    for _ in range(allowed):
        assert not _learn_left(env, model, worker, right, left).success
    assert worker.inventory.index[left] == 0
    _learn_left(env, model, worker, right, left)
    assert left not in worker.inventory.index
    assert worker.rejected[left] == {0}
    assert worker.skill_for(right).frozen


def test_failing_reused_skill_without_other_users_is_unfrozen():
    spec, env, model, worker, right, left = _shared_left_key()
    # the rightward key still holds the skill but is no longer reliable
    for _ in range(10):
        model.record_attempt(right, False)
    model.demoted = []
    assert right not in model.actions
    for _ in range(int(model.params.delta * model.params.n_transition) + 1):
        _learn_left(env, model, worker, right, left)
    assert worker.inventory.index[left] == 0
    assert not worker.inventory.skills[0].frozen
