"""Flat tabular Q-learning with a count bonus, used as a comparison point."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import N_ACTIONS, AbstractState, ConcreteState, GridQuest, MapSpec, abstract
from .oracle import identity


@dataclass
class FlatConfig:
    alpha: float = 0.1
    gamma: float = 0.99
    beta: float = 0.63
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    # fraction of the frame budget over which epsilon decays linearly
    decay_fraction: float = 0.5


@dataclass
class FlatAgent:
    spec: MapSpec
    config: FlatConfig = field(default_factory=FlatConfig)
    qtable: dict[ConcreteState, np.ndarray] = field(default_factory=dict)
    visits: dict[AbstractState, int] = field(default_factory=dict)

    @property
    def sticky(self) -> bool:
        return self.spec.sticky_prob > 0

    def q(self, x: ConcreteState) -> np.ndarray:
        k = identity(x, self.sticky)
        row = self.qtable.get(k)
        if row is None:
            row = self.qtable[k] = np.zeros(N_ACTIONS)
        return row

    def epsilon(self, frames: int, budget: int) -> float:
        c = self.config
        span = max(1.0, c.decay_fraction * budget)
        frac = min(1.0, frames / span)
        return c.epsilon_start + frac * (c.epsilon_end - c.epsilon_start)

    def bonus(self, s: AbstractState) -> float:
        n = self.visits.get(s, 0) + 1
        self.visits[s] = n
        return self.config.beta / np.sqrt(n)

    def greedy(self, x: ConcreteState) -> int:
        row = self.qtable.get(identity(x, self.sticky))
        return 0 if row is None else int(np.argmax(row))

    def update(self, x, a, r, x2, ended: bool) -> None:
        """One-step Q-learning; episodes cut by the time limit still bootstrap."""
        row = self.q(x)
        target = r if ended else r + self.config.gamma * float(self.q(x2).max())
        row[a] += self.config.alpha * (target - row[a])


def evaluate(agent: FlatAgent, env: GridQuest) -> float:
    """Return of one greedy episode; does not touch the agent."""
    x = env.reset()
    total = 0.0
    while not env.done:
        x, r, _ = env.step(agent.greedy(x))
        total += r
    return total


def train(env: GridQuest, frames_budget: int, seed: int = 0, eval_every: int = 200,
          config: FlatConfig | None = None, eval_env: GridQuest | None = None,
          agent: FlatAgent | None = None,
          log: Callable[[int, int, FlatAgent, float], None] | None = None) -> list[tuple[int, float]]:
    """Train for ``frames_budget`` frames; returns (frames, greedy eval return) samples.

    An evaluation runs every ``eval_every`` training episodes and once at the
    end, on a separate environment whose frames are not charged to the budget.
    ``log(episode, frames, agent, eval_return)`` is called after each evaluation.
    """
    if frames_budget <= 0:
        return []
    agent = agent or FlatAgent(env.spec, config or FlatConfig())
    rng = np.random.default_rng(seed)
    eval_env = eval_env or GridQuest(env.spec, seed + 1)
    start = env.frames
    end = start + frames_budget
    curve = []
    episode = 0
    while env.frames < end:
        x = env.reset()
        while not env.done and env.frames < end:
            if rng.random() < agent.epsilon(env.frames - start, frames_budget):
                a = int(rng.integers(N_ACTIONS))
            else:
                a = agent.greedy(x)
            x2, r, _ = env.step(a)
            ended = not x2.alive or x2.agent_pos in env.spec.goal_cells
            agent.update(x, a, r + agent.bonus(abstract(x2, env.spec)), x2, ended)
            x = x2
        episode += 1
        if (episode % eval_every == 0) or env.frames >= end:
            curve.append((env.frames - start, evaluate(agent, eval_env)))
            if log is not None:
                log(episode, curve[-1][0], agent, curve[-1][1])
    return curve
