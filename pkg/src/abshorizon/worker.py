"""The worker: learns candidate transitions as skills and executes frozen ones."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .amodel import AbstractModel, TransitionKey
from .env import ConcreteState, GridQuest, MapSpec, abstract
from .skills import Featurizer, LearnerConfig, Skill


@dataclass
class WorkerParams:
    h_worker: int = 30
    r_hold: int = 4
    blind_budget: int = 200
    greedy_probe: bool = True


@dataclass
class SubtaskOutcome:
    success: bool
    extrinsic_reward: float
    intrinsic_sum: float
    steps_used: int
    final_state: ConcreteState | None = None
    terminal: bool = False


@dataclass
class SkillInventory:
    skills: list[Skill] = field(default_factory=list)
    index: dict[TransitionKey, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.skills)

    def keys_using(self, pos: int) -> list[TransitionKey]:
        return sorted(k for k, p in self.index.items() if p == pos)


class PreconditionError(RuntimeError):
    pass


class Worker:
    def __init__(self, spec: MapSpec, params: WorkerParams | None = None,
                 learner: LearnerConfig | None = None, rng: np.random.Generator | None = None):
        self.spec = spec
        self.params = params or WorkerParams()
        self.learner = learner or LearnerConfig(r_hold=self.params.r_hold)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.inventory = SkillInventory()
        self._featurizers = {
            True: Featurizer(spec, blind=True, r_hold=self.params.r_hold),
            False: Featurizer(spec, blind=False, r_hold=self.params.r_hold),
        }
        # episodes each key has spent on its current (unfrozen) skill
        self.episodes_on_skill: dict[TransitionKey, int] = {}
        self.reuse_count = 0
        self.escalations = 0
        # skills already demoted on a key are never offered to it again
        self.rejected: dict[TransitionKey, set[int]] = {}
        # deterministic maps: distinct concrete states in which frozen skills delivered the agent,
        # keyed by abstract state; each keeps its earliest step count
        self.arrivals: dict = {}
        self.arrivals_per_state = 32
        # failures of a frozen skill on a key it was reused for but that is not reliable yet
        self.reuse_failures: dict[TransitionKey, int] = {}
        # (skill, map, start state, key, horizon) -> outcome; deterministic maps + frozen skills only
        self._memo: dict = {}
        self.memo_enabled = True
        self._env_moved = False

    # -- skill execution ------------------------------------------------------

    def horizon(self, model: AbstractModel, key: TransitionKey) -> int:
        return model.candidates[key].distance * self.params.h_worker

    def run_skill(self, env: GridQuest, skill: Skill, key: TransitionKey, horizon: int,
                  learn: bool) -> SubtaskOutcome:
        """Run one subtask episode from the env's current state.

        The episode ends on success (R_hold consecutive steps in ``key.dst``),
        on leaving ``key.dst`` before that, on main-episode termination, on
        negative extrinsic reward, or after ``horizon`` steps.
        """
        spec = env.spec
        dst = key.dst
        r_hold = self.params.r_hold
        x = env.state
        memo_key = None
        if not learn and self.memo_enabled and env.deterministic and skill.frozen:
            # dynamics ignore step_count until the episode horizon, so it is factored out
            memo_key = (skill, spec, x._replace(step_count=0), key, horizon)
            hit = self._memo.get(memo_key)
            if hit is not None and x.step_count + hit.steps_used < spec.horizon:
                final = hit.final_state._replace(step_count=hit.final_state.step_count + x.step_count)
                env.restore(env.snapshot()._replace(state=final))
                env.charge(hit.steps_used)
                return SubtaskOutcome(hit.success, hit.extrinsic_reward, hit.intrinsic_sum,
                                      hit.steps_used, final, hit.terminal)
            if hit is not None:
                memo_key = None
        hold = 0
        idx = skill.encode(x, dst, hold)
        intrinsic = extrinsic = 0.0
        success = terminal = False
        traj = []
        steps = 0
        for _ in range(horizon):
            a = skill.act(idx) if learn else skill.greedy(idx)
            x2, r_e, done = env.step(a)
            steps += 1
            extrinsic += r_e
            s2 = abstract(x2, spec)
            r_i = 1.0 if s2 == dst else 0.0
            intrinsic += r_i
            left = hold > 0 and not r_i
            hold = hold + 1 if r_i else 0
            success = hold >= r_hold and r_e >= 0
            # leaving dst after entering it ends the subtask, which keeps returns within [0, r_hold]
            failed = done or r_e < 0 or left
            end = success or failed
            idx2 = skill.encode(x2, dst, hold)
            if learn:
                bonus = skill.intrinsic_bonus(s2)
                skill.observe(idx, a, r_i + bonus, idx2, end)
                traj.append((idx, a, r_i))
            idx = idx2
            if end:
                terminal = done
                break
        out = SubtaskOutcome(success, extrinsic, intrinsic, steps, env.state, terminal)
        if memo_key is not None and env.state.step_count < spec.horizon:
            self._memo[memo_key] = SubtaskOutcome(
                success, extrinsic, intrinsic, steps,
                env.state._replace(step_count=env.state.step_count - x.step_count), terminal)
        if learn:
            skill.episodes_seen += 1
            if success:
                skill.self_imitate(traj)
            else:
                skill.imitation_update()
        return out

    def skill_for(self, key: TransitionKey) -> Skill:
        pos = self.inventory.index.get(key)
        if pos is None:
            raise PreconditionError(f"no skill assigned to {key}")
        return self.inventory.skills[pos]

    def traverse(self, env: GridQuest, key: TransitionKey, model: AbstractModel,
                 record: bool = True) -> SubtaskOutcome:
        """Execute an abstract action greedily with its frozen skill."""
        skill = self.skill_for(key)
        if not skill.frozen:
            raise PreconditionError(f"skill for {key} is not frozen")
        out = self.run_skill(env, skill, key, self.horizon(model, key), learn=False)
        # an agent still falling is not at rest, whatever bucket it is passing through
        if out.success and env.deterministic and not env.done and env.state.fall_height == 0:
            self.note_arrival(env.state)
        if record:
            model.record_attempt(key, out.success)
            self._handle_demotions(model)
        return out

    def note_arrival(self, x: ConcreteState) -> None:
        seen = self.arrivals.setdefault(abstract(x, self.spec), {})
        ident = x._replace(step_count=0, last_action=None)
        old = seen.get(ident)
        if old is not None:
            if x.step_count < old.step_count:
                seen[ident] = x
        elif len(seen) < self.arrivals_per_state:
            seen[ident] = x

    # -- learning ---------------------------------------------------------------

    def learn(self, env: GridQuest, key: TransitionKey, x0: ConcreteState, model: AbstractModel,
              fresh_start: Callable[[], bool] | None = None) -> SubtaskOutcome:
        """One learning round for ``key`` starting from ``x0``.

        Assigns a skill on first use (reuse, else spawn), runs one exploratory
        training episode, then one greedy attempt from a fresh start whose
        outcome is what the model records.
        """
        if abstract(x0, env.spec) != key.src:
            raise PreconditionError(f"learn called at {abstract(x0, env.spec)}, expected {key.src}")
        if key not in model.candidates:
            raise PreconditionError(f"{key} is not a candidate")
        if fresh_start is None:
            token = env.snapshot()._replace(state=x0)

            def fresh_start():
                env.restore(token)
                return True

        stats = model.candidates[key]
        if key not in self.inventory.index:
            self._env_moved = False
            pos = self.try_reuse(env, key, self.inventory, model, fresh_start)
            if pos is None:
                pos = self.spawn_skill(key, stats.distance)
            else:
                self.reuse_count += 1
            self._assign(key, pos, model)
            if self._env_moved and not fresh_start():
                return SubtaskOutcome(False, 0.0, 0.0, 0, env.state, env.done)
        pos = self.inventory.index[key]
        skill = self.inventory.skills[pos]
        horizon = self.horizon(model, key)
        out = self.run_skill(env, skill, key, horizon, learn=not skill.frozen)
        if not skill.frozen and self.params.greedy_probe:
            # reliability evidence comes from a greedy attempt, not the exploratory one
            model.record_outcome(key, out.success)
            if not fresh_start():
                return out
            out = self.run_skill(env, skill, key, horizon, learn=False)
        p_hat = model.record_attempt(key, out.success)
        if out.success:
            model.record_reward(key, out.extrinsic_reward)
        if not skill.frozen:
            skill.p_success = p_hat
            self.episodes_on_skill[key] = self.episodes_on_skill.get(key, 0) + 1
        if key in model.actions and not skill.frozen:
            skill.freeze()
        elif skill.frozen and key not in model.actions and not out.success:
            self._drop_unreliable_reuse(key, pos, model)
        self._handle_demotions(model)
        if (skill.blind and not skill.frozen and key not in model.actions
                and self.episodes_on_skill.get(key, 0) >= self.params.blind_budget):
            self._escalate(key, pos)
        return out

    def try_reuse(self, env: GridQuest, key: TransitionKey, inventory: SkillInventory,
                  model: AbstractModel, fresh_start: Callable[[], bool]) -> int | None:
        """Evaluate frozen skills greedily on ``key``; return the first reliable one.

        Skills that were already demoted on ``key`` are skipped.

        Evaluation of a skill stops as soon as its verdict is settled: once it
        has more failures than the reliability threshold allows, or, on a
        deterministic map, after the first attempt (a frozen greedy skill
        from a fixed start repeats the same outcome every time).
        """
        n = model.params.n_transition
        allowed = math.floor(model.params.delta * n + 1e-9)
        horizon = self.horizon(model, key)
        repeatable = env.deterministic and self.memo_enabled
        rejected = self.rejected.get(key, ())
        for pos, skill in enumerate(inventory.skills):
            if not skill.frozen or pos in rejected:
                continue
            succ = fail = 0
            for _ in range(n):
                if self._env_moved and not fresh_start():
                    continue
                out = self.run_skill(env, skill, key, horizon, learn=False)
                self._env_moved = True
                if out.success:
                    succ += 1
                else:
                    fail += 1
                if fail > allowed or repeatable:
                    break
            if repeatable and succ:
                return pos
            if succ and succ / n >= 1.0 - model.params.delta:
                return pos
        return None

    def _drop_unreliable_reuse(self, key: TransitionKey, pos: int, model: AbstractModel) -> None:
        """A frozen skill that keeps failing on a key it was reused for is taken off that key.

        Otherwise a skill that is almost good enough never becomes reliable
        and, being frozen, never improves either.
        """
        allowed = math.floor(model.params.delta * model.params.n_transition + 1e-9)
        self.reuse_failures[key] = self.reuse_failures.get(key, 0) + 1
        if self.reuse_failures[key] <= allowed:
            return
        if any(k != key and k in model.actions for k in self.inventory.keys_using(pos)):
            self.rejected.setdefault(key, set()).add(pos)
            del self.inventory.index[key]
            model.candidates[key].skill_index = None
        else:
            self.inventory.skills[pos].unfreeze()
            self._memo = {k: v for k, v in self._memo.items() if k[0] is not self.inventory.skills[pos]}
        self.episodes_on_skill[key] = 0
        self.reuse_failures[key] = 0

    def spawn_skill(self, key: TransitionKey, distance: int) -> int:
        blind = distance == 1
        return self._new_skill(blind)

    def _new_skill(self, blind: bool) -> int:
        seed = int(self.rng.integers(2**63))
        skill = Skill(self._featurizers[blind], self.learner, np.random.default_rng(seed))
        self.inventory.skills.append(skill)
        return len(self.inventory.skills) - 1

    def _assign(self, key: TransitionKey, pos: int, model: AbstractModel) -> None:
        self.inventory.index[key] = pos
        model.candidates[key].skill_index = pos
        self.episodes_on_skill[key] = 0
        self.reuse_failures[key] = 0

    def _escalate(self, key: TransitionKey, pos: int) -> None:
        """Replace an unreliable blind skill with a fresh observation-conditioned one."""
        seed = int(self.rng.integers(2**63))
        self.inventory.skills[pos] = Skill(self._featurizers[False], self.learner, np.random.default_rng(seed))
        self.episodes_on_skill[key] = 0
        self.escalations += 1

    def _handle_demotions(self, model: AbstractModel) -> None:
        for key in model.demoted:
            pos = self.inventory.index.get(key)
            if pos is None:
                continue
            others = [k for k in self.inventory.keys_using(pos) if k != key and k in model.actions]
            if others:
                # shared frozen skill stays frozen; the key goes back through reuse/spawn
                self.rejected.setdefault(key, set()).add(pos)
                del self.inventory.index[key]
                model.candidates[key].skill_index = None
            else:
                self.inventory.skills[pos].unfreeze()
                self._memo = {k: v for k, v in self._memo.items() if k[0] is not self.inventory.skills[pos]}
            self.episodes_on_skill[key] = 0
        model.demoted = []
