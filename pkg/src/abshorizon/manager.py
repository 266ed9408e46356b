"""Goal selection, planning, navigation and discovery on top of the abstract model."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .amodel import AbstractModel, TransitionKey
from .env import N_ACTIONS, AbstractState, GridQuest, abstract
from .worker import Worker

DISCOVER = "discover"
LEARN = "learn"


@dataclass
class ManagerParams:
    lambda1: float = 100.0
    lambda2: float = 5000.0
    lambda3: float = -2000.0
    t_d: int = 50
    n_visit: int = 500
    t_repeat: int = 20
    # learning rounds that start from an archived arrival instead of the planned route (deterministic maps)
    arrival_mix: float = 0.5
    # most attempts per action in the closing verification sweep on sticky maps
    verify_attempts: int = 100


@dataclass(frozen=True)
class ExplorationGoal:
    kind: str
    target: AbstractState | TransitionKey
    priority: float

    @property
    def start(self) -> AbstractState:
        """The abstract state the manager must reach before working on the goal."""
        return self.target if self.kind == DISCOVER else self.target.src


@dataclass
class Plan:
    steps: list[TransitionKey] = field(default_factory=list)
    predicted_reward: float = 0.0


class ModelComplete(Exception):
    """No exploration goals remain: the abstract MDP is fully constructed."""


class UnreachableError(RuntimeError):
    pass


# -- priorities ---------------------------------------------------------------


def discover_priority(visits: int) -> float:
    return -float(visits)


def learn_priority(n_succ: int, n_fail: int, distance: int, bottleneck: bool, p: ManagerParams) -> float:
    return p.lambda1 * n_succ - n_fail - distance**2 + (p.lambda2 if bottleneck else 0.0) + p.lambda3


def score_goals(model: AbstractModel, episode_index: int, params: ManagerParams | None = None) -> list[ExplorationGoal]:
    """All admissible goals, highest priority first.

    Even episodes rank by visit counts and learning progress alone; odd
    episodes add the planned reward from the start state to the goal's
    start state.
    """
    p = params or ManagerParams()
    with_reward = episode_index % 2 == 1
    reward_to: dict[AbstractState, float] = plan_rewards_from(model, model.start_state) if with_reward else {}
    goals = []
    for s in sorted(model.novel_states(p.n_visit)):
        goals.append(ExplorationGoal(DISCOVER, s, discover_priority(model.visit_count.get(s, 0)) + reward_to.get(s, 0.0)))
    for key in sorted(model.candidates):
        if key.src not in model.known_set or key in model.actions:
            continue
        st = model.candidates[key]
        pr = learn_priority(st.n_succ, st.n_fail, st.distance, model.is_bottleneck(key), p)
        goals.append(ExplorationGoal(LEARN, key, pr + reward_to.get(key.src, 0.0)))
    if not goals:
        raise ModelComplete("abstract MDP fully constructed")
    # sort is stable, so equal priorities keep state order then key order
    goals.sort(key=lambda g: -g.priority)
    return goals


# -- planning -----------------------------------------------------------------


def _shortest_paths(model: AbstractModel, source: AbstractState) -> dict[AbstractState, tuple[int, tuple, float]]:
    """Unit-cost Dijkstra over reliable actions.

    Each entry is (hops, path, reward). Ties between equal-hop paths go to the
    lexicographically smallest key sequence.
    """
    best: dict[AbstractState, tuple[int, tuple, float]] = {}
    heap = [(0, (), source, 0.0)]
    while heap:
        hops, path, s, reward = heapq.heappop(heap)
        if s in best:
            continue
        best[s] = (hops, path, reward)
        for key in model.out_actions(s):
            if key.dst not in best:
                heapq.heappush(heap, (hops + 1, path + (key,), key.dst, reward + model.reward(key)))
    return best


def plan_to(model: AbstractModel, current: AbstractState, target: AbstractState) -> Plan:
    if current == target:
        return Plan()
    best = _shortest_paths(model, current)
    if target not in best:
        raise UnreachableError(f"{target} is not reachable from {current} through reliable actions")
    _, path, reward = best[target]
    return Plan(list(path), reward)


def plan_rewards_from(model: AbstractModel, source: AbstractState) -> dict[AbstractState, float]:
    return {s: r for s, (_, _, r) in _shortest_paths(model, source).items()}


def plan_reward_to(model: AbstractModel, s: AbstractState) -> float:
    return plan_to(model, model.start_state, s).predicted_reward


# -- acting ---------------------------------------------------------------------


def navigate(env: GridQuest, model: AbstractModel, worker: Worker, plan: Plan, record: bool = True) -> bool:
    """Follow ``plan`` with frozen skills; stop at the first failed step or episode end.

    A step demoted since the plan was made (by an earlier step's recorded
    failure) also stops navigation.
    """
    for key in plan.steps:
        if env.done or key not in model.actions:
            return False
        out = worker.traverse(env, key, model, record=record)
        if not out.success:
            return False
    return True


def execute_plan(env: GridQuest, model: AbstractModel, worker: Worker, plan: list[TransitionKey] | Plan) -> tuple[float, bool]:
    """Run a plan greedily without touching the model; returns (extrinsic return, completed)."""
    steps = plan.steps if isinstance(plan, Plan) else plan
    total = 0.0
    for key in steps:
        if env.done:
            return total, False
        out = worker.traverse(env, key, model, record=False)
        total += out.extrinsic_reward
        if not out.success:
            return total, False
    return total, True


def discover(env: GridQuest, model: AbstractModel, params: ManagerParams, rng: np.random.Generator) -> int:
    """Run the repeat-action random policy from the current state and add what it observed."""
    spec = env.spec
    seq = [abstract(env.state, spec)]
    while not env.done:
        start = abstract(env.state, spec)
        remaining = 0
        action = 0
        for _ in range(params.t_d):
            if remaining == 0:
                action = int(rng.integers(N_ACTIONS))
                remaining = int(rng.integers(1, params.t_repeat + 1))
            x, _, done = env.step(action)
            remaining -= 1
            if x.alive:
                seq.append(abstract(x, spec))
            if done:
                break
        model.visit(start)
        if env.done or model.visit_count.get(abstract(env.state, spec), 0) > params.n_visit:
            break
    return model.add_candidates([seq])


@dataclass
class EpisodeReport:
    episode: int
    goal: ExplorationGoal | None
    frames: int
    reached_goal: bool
    success: bool
    new_candidates: int = 0
    complete: bool = False


class Manager:
    def __init__(self, env: GridQuest, model: AbstractModel, worker: Worker,
                 params: ManagerParams | None = None, rng: np.random.Generator | None = None,
                 score_fn: Callable | None = None):
        self.env = env
        self.model = model
        self.worker = worker
        self.params = params or ManagerParams()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.score_fn = score_fn or score_goals
        self.episode = 0

    def _fresh_start(self, plan: Plan, key: TransitionKey) -> Callable[[], bool]:
        env, model = self.env, self.model
        if env.deterministic:
            token = env.snapshot()
            frames = env.state.step_count

            def restore() -> bool:
                env.restore(token)
                env.charge(frames)
                return True
            return restore

        def renavigate() -> bool:
            env.reset()
            ok = navigate(env, model, self.worker, plan)
            return ok and not env.done and abstract(env.state, env.spec) == key.src
        return renavigate

    def _start_from_arrival(self, s: AbstractState) -> bool:
        """Maybe jump to a stored arrival in ``s``, charging the frames it took to get there.

        Skills are otherwise trained only from the state the current plan
        happens to reach, and fail when a later plan arrives differently.
        """
        env = self.env
        seen = self.worker.arrivals.get(s)
        if not env.deterministic or not seen or self.rng.random() >= self.params.arrival_mix:
            return False
        states = list(seen.values())
        x = states[int(self.rng.integers(len(states)))]
        env.restore(env.snapshot()._replace(state=x))
        env.charge(x.step_count)
        return True

    def verify(self) -> int:
        """Re-test every reliable action from where its planned route arrives, recording outcomes.

        On a deterministic map an action is retried until it succeeds or has
        failed often enough to be demoted. On a sticky map attempts continue
        until a sequential likelihood-ratio test accepts the action as good
        (success 1 - delta against 1 - delta - 0.1), the action is demoted,
        or ``verify_attempts`` attempts have been made. Returns the number of
        actions demoted.
        """
        env, model = self.env, self.model
        allowed = math.floor(model.params.delta * model.params.n_transition + 1e-9)
        good = 1.0 - model.params.delta
        bad = good - 0.1
        win, loss = math.log(good / bad), math.log((1.0 - good) / (1.0 - bad))
        accept = math.log(19.0)  # 5% error either way
        before = set(model.actions)
        for key in sorted(before):
            made = llr = 0.0
            tries = 0
            limit = allowed + 1 if env.deterministic else self.params.verify_attempts
            while made < limit and tries < 3 * limit and key in model.actions:
                tries += 1
                env.reset()
                try:
                    plan = plan_to(model, model.start_state, key.src)
                except UnreachableError:
                    break
                if not navigate(env, model, self.worker, plan) or env.done or key not in model.actions:
                    continue
                made += 1
                out = self.worker.traverse(env, key, model)
                if env.deterministic:
                    if out.success:
                        break
                    continue
                llr += win if out.success else loss
                if llr >= accept:
                    break
        return len(before - model.actions)

    def run_episode(self) -> EpisodeReport:
        env, model = self.env, self.model
        index = self.episode
        self.episode += 1
        frames0 = env.frames
        env.reset()
        if env.deterministic:
            self.worker.note_arrival(env.state)
        try:
            goals = self.score_fn(model, index, self.params)
        except ModelComplete:
            return EpisodeReport(index, None, 0, False, False, complete=True)
        goal = goals[0]
        plan = plan_to(model, model.start_state, goal.start)
        if goal.kind == LEARN and self._start_from_arrival(goal.start):
            reached = True
        else:
            reached = navigate(env, model, self.worker, plan) and not env.done
        success = False
        added = 0
        if reached and goal.kind == DISCOVER:
            added = discover(env, model, self.params, self.rng)
            success = True
        elif reached:
            out = self.worker.learn(env, goal.target, env.state, model, self._fresh_start(plan, goal.target))
            success = out.success
        return EpisodeReport(index, goal, env.frames - frames0, reached, success, added)
