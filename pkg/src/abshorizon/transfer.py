"""Reusing a trained abstract model and its frozen skills on a new reward function."""
from __future__ import annotations

import re
import warnings
from collections import deque
from dataclasses import dataclass, field

from .amodel import AbstractModel, TransitionKey
from .env import (
    BudgetExhausted, GridQuest, MapError, MapSpec, abstract, parse_assignments, parse_kv, reward_overrides,
)
from .manager import execute_plan
from .oracle import abstract_value_iterate
from .worker import Worker

_BUCKET = re.compile(r"^bucket\s*\(\s*(\d+)\s*,\s*(\d+)\s*\)$")


class TransferWarning(UserWarning):
    pass


@dataclass
class RewardTask:
    name: str
    reward_map: dict[str, str] = field(default_factory=dict)
    terminal_on: str | None = None
    budget_frames: int = 20_000

    def apply(self, spec: MapSpec) -> MapSpec:
        """The training map with this task's rewards and goal cells; dynamics are unchanged."""
        treasure_ids = [i for i in sorted(set(spec.items.values())) if i >= 4]
        rewards, hazard = reward_overrides(self.reward_map, spec.item_rewards, treasure_ids, spec.hazard_reward)
        goal_reward = float(self.reward_map.get("goal", 0.0))
        return spec.with_changes(item_rewards=rewards, hazard_reward=hazard,
                                 goal_cells=self.goal_cells(spec), goal_reward=goal_reward)

    def goal_cells(self, spec: MapSpec) -> frozenset:
        if not self.terminal_on:
            return frozenset()
        m = _BUCKET.match(self.terminal_on.strip())
        b = spec.bucket_size
        cells = set()
        for y, row in enumerate(spec.grid):
            for x, c in enumerate(row):
                if m is not None:
                    hit = x // b == int(m.group(1)) and y // b == int(m.group(2)) and c not in "#"
                else:
                    hit = c == self.terminal_on.strip()
                if hit:
                    cells.add((x, y))
        if not cells:
            raise MapError(f"terminal_on {self.terminal_on!r} matches no cell")
        return frozenset(cells)


def load_task(text: str) -> RewardTask:
    task = RewardTask(name="task")
    for key, value in parse_kv(text):
        if key == "task":
            task.name = value
        elif key == "reward":
            task.reward_map.update(parse_assignments(value))
        elif key == "terminal_on":
            task.terminal_on = value
        elif key == "budget":
            task.budget_frames = int(value)
        else:
            raise MapError(f"unknown task key {key!r}")
    return task


def load_task_file(path) -> RewardTask:
    with open(path, encoding="utf-8") as fh:
        return load_task(fh.read())


# -- zero-shot ---------------------------------------------------------------------


def zero_shot(model: AbstractModel, abstract_reward: dict[TransitionKey, float]) -> tuple[list[TransitionKey], float]:
    missing = sorted(k for k in model.actions if k not in abstract_reward)
    if missing:
        raise KeyError("no reward given for: " + ", ".join(str(k) for k in missing))
    value, plan = abstract_value_iterate(model, rewards=abstract_reward)
    return plan, value


# -- few-shot ----------------------------------------------------------------------


@dataclass
class TransferResult:
    achieved_return: float
    planned_value: float
    plan: list[TransitionKey]
    rewards: dict[TransitionKey, float]
    relabeled: set[TransitionKey]
    frames_used: int
    eval_frames: int
    complete_pass: bool
    warnings: list[str] = field(default_factory=list)


def _nearest_untouched(model: AbstractModel, s, untouched: set) -> list[TransitionKey] | None:
    """Hop-minimal path from ``s`` that ends with an untouched action; ties go to the smaller key."""
    prev = {s: None}
    frontier = deque([s])
    while frontier:
        level = sorted(frontier)
        frontier = deque()
        hits = [k for u in level for k in model.out_actions(u) if k in untouched]
        if hits:
            key = min(hits)
            path = [key]
            u = key.src
            while prev[u] is not None:
                path.append(prev[u])
                u = prev[u].src
            return path[::-1]
        for u in level:
            for k in model.out_actions(u):
                if k.dst not in prev:
                    prev[k.dst] = k
                    frontier.append(k.dst)
    return None


def relabel(env: GridQuest, model: AbstractModel, worker: Worker,
            budget_frames: int) -> tuple[dict, set, bool, set]:
    """Traverse every reachable action once, recording the extrinsic reward seen on it.

    A traversal counts once the destination is reached, even if the new
    task's goal ends the episode before the hold completes. Destinations where
    that happens are returned as terminal; actions leaving them are dropped,
    since the new task can never take them.
    """
    rewards: dict[TransitionKey, float] = {}
    terminal: set = set()
    untouched = {k for k in model.actions if k.src in model.known_set}
    limit0 = env.frame_limit
    env.frame_limit = env.frames + budget_frames if limit0 is None else min(limit0, env.frames + budget_frames)
    stalled = 0
    try:
        while untouched and stalled < 3:
            env.reset()
            progress = False
            while untouched and not env.done:
                path = _nearest_untouched(model, abstract(env.state, env.spec), untouched)
                if path is None:
                    break
                ok = True
                for key in path:
                    out = worker.traverse(env, key, model, record=False)
                    reached = abstract(env.state, env.spec) == key.dst and env.state.alive
                    if key in untouched and (out.success or reached):
                        rewards[key] = out.extrinsic_reward
                        untouched.discard(key)
                        progress = True
                    if reached and env.state.agent_pos in env.spec.goal_cells:
                        terminal.add(key.dst)
                        untouched -= {k for k in untouched if k.src == key.dst}
                    if not out.success:
                        ok = False
                        break
                if not ok:
                    break
            stalled = 0 if progress else stalled + 1
    except BudgetExhausted:
        pass
    finally:
        env.frame_limit = limit0
    return rewards, untouched, not untouched, terminal


def few_shot(env: GridQuest, model: AbstractModel, worker: Worker, budget_frames: int,
             eval_env: GridQuest | None = None) -> TransferResult:
    """Relabel rewards within ``budget_frames``, replan, and run the plan once on ``eval_env``.

    The model's dynamics estimates are never touched; rewards are relabeled on
    a copy. Actions left unvisited keep their stored reward estimate.
    """
    notes = []
    start_frames = env.frames
    goal_states = {abstract(env.state._replace(agent_pos=c), env.spec) for c in env.spec.goal_cells}
    if goal_states and not any(
        s.bx == g.bx and s.by == g.by and s.room == g.room for g in goal_states for s in model.known_set
    ):
        msg = "task goal lies outside the known set; the transferred plan cannot reach it"
        warnings.warn(msg, TransferWarning, stacklevel=2)
        notes.append(msg)
    if budget_frames > 0:
        observed, untouched, complete, terminal = relabel(env, model, worker, budget_frames)
    else:
        observed, untouched, complete, terminal = {}, set(model.actions), False, set()
    if not complete:
        msg = f"relabel pass incomplete: {len(untouched)} actions keep their stored rewards"
        warnings.warn(msg, TransferWarning, stacklevel=2)
        notes.append(msg)
    rewards = {k: observed.get(k, model.reward(k)) for k in model.actions}
    value, plan = abstract_value_iterate(model, rewards=rewards, terminal=terminal)
    eval_env = eval_env or GridQuest(env.spec)
    eval_frames0 = eval_env.frames
    eval_env.reset()
    achieved, _ = execute_plan(eval_env, model, worker, plan)
    return TransferResult(achieved, value, plan, rewards, set(observed), env.frames - start_frames,
                          eval_env.frames - eval_frames0, complete, notes)
