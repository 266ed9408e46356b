"""Brute-force ground truth for small maps: enumeration, value iteration, coverage targets."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .amodel import AbstractModel, TransitionKey
from .env import N_ACTIONS, AbstractState, ConcreteState, MapSpec, abstract, reset, transition


class StateLimitError(RuntimeError):
    pass


@dataclass
class EnumeratedMDP:
    spec: MapSpec
    states: list[ConcreteState]
    index: dict[ConcreteState, int]
    # outcome k of (state, action): next_state[k], reward[k], terminal[k], prob[k]; k=0 is the chosen action
    next_state: list[np.ndarray]
    reward: list[np.ndarray]
    terminal: list[np.ndarray]
    prob: list[np.ndarray]
    depth: np.ndarray
    horizon: int

    def __len__(self) -> int:
        return len(self.states)

    @property
    def start(self) -> int:
        return 0


def identity(state: ConcreteState, sticky: bool) -> ConcreteState:
    """The part of a state that the dynamics depend on (the step counter only matters at the horizon)."""
    return state._replace(step_count=0, last_action=state.last_action if sticky else None)


def enumerate_states(spec: MapSpec, limit: int = 200_000) -> EnumeratedMDP:
    sticky = spec.sticky_prob > 0
    s0 = identity(reset(spec), sticky)
    states = [s0]
    index = {s0: 0}
    depth = [0]
    n_out = 2 if sticky else 1
    # rows[i] = per outcome k: (next ids, rewards, terminal flags) over actions
    rows: dict[int, list[tuple[list[int], list[float], list[bool]]]] = {}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        s = states[i]
        out = [([0] * N_ACTIONS, [0.0] * N_ACTIONS, [False] * N_ACTIONS) for _ in range(n_out)]
        for a in range(N_ACTIONS):
            effective = [a] if not sticky else [a, a if s.last_action is None else s.last_action]
            for k, ea in enumerate(effective):
                x2, r, _ = transition(spec, s, ea)
                done = (not x2.alive) or x2.agent_pos in spec.goal_cells
                key = identity(x2, sticky)
                j = index.get(key)
                if j is None:
                    if len(states) >= limit:
                        raise StateLimitError(f"state limit {limit} exceeded after {len(states)} states")
                    j = len(states)
                    states.append(key)
                    index[key] = j
                    depth.append(depth[i] + 1)
                    if not done:
                        queue.append(j)
                out[k][0][a], out[k][1][a], out[k][2][a] = j, r, done
        rows[i] = out
    n = len(states)
    nxt = np.tile(np.arange(n)[:, None], (n_out, 1, N_ACTIONS))
    rew = np.zeros((n_out, n, N_ACTIONS))
    term = np.ones((n_out, n, N_ACTIONS), dtype=bool)  # unexpanded (terminal) states absorb
    for i, out in rows.items():
        for k in range(n_out):
            nxt[k, i], rew[k, i], term[k, i] = out[k]
    p = spec.sticky_prob
    probs = [np.full((n, N_ACTIONS), 1.0 - p), np.full((n, N_ACTIONS), p)] if sticky else [np.ones((n, N_ACTIONS))]
    return EnumeratedMDP(spec, states, index, list(nxt), list(rew), list(term), probs,
                         np.array(depth, dtype=np.int64), spec.horizon)


def value_iterate(mdp: EnumeratedMDP, horizon: int | None = None) -> tuple[float, list[int]]:
    """Finite-horizon undiscounted optimum from the start state and one optimal action sequence.

    The action sequence follows the most likely outcome, so it is exact on
    deterministic maps. Ties go to the smallest action id.
    """
    h = mdp.horizon if horizon is None else horizon
    n = len(mdp)
    values = [np.zeros(n)]
    policy = []
    v = values[0]
    for _ in range(h):
        q = np.zeros((n, N_ACTIONS))
        for k in range(len(mdp.prob)):
            q += mdp.prob[k] * (mdp.reward[k] + np.where(mdp.terminal[k], 0.0, v[mdp.next_state[k]]))
        policy.append(np.argmax(q, axis=1).astype(np.int8))
        v = q.max(axis=1)
        values.append(v)
    # policy[t] is optimal with t+1 steps to go
    actions = []
    s = mdp.start
    for t in range(h, 0, -1):
        a = int(policy[t - 1][s])
        actions.append(a)
        if mdp.terminal[0][s, a]:
            break
        s = int(mdp.next_state[0][s, a])
    return float(values[h][mdp.start]), actions


def rollout_return(spec: MapSpec, actions: list[int]) -> float:
    x = reset(spec)
    total = 0.0
    for a in actions:
        x, r, done = transition(spec, x, a)
        total += r
        if done:
            break
    return total


def holdable_states(mdp: EnumeratedMDP, r_hold: int = 4) -> set[AbstractState]:
    """Abstract states of reachable live states in which the agent can stay for ``r_hold - 1`` more steps."""
    spec = mdp.spec
    n = len(mdp)
    abs_id = {}
    sid = np.empty(n, dtype=np.int64)
    alive = np.empty(n, dtype=bool)
    for i, s in enumerate(mdp.states):
        sid[i] = abs_id.setdefault(abstract(s, spec), len(abs_id))
        alive[i] = s.alive
    nxt, term = mdp.next_state[0], mdp.terminal[0]
    same = (sid[nxt] == sid[:, None]) & ~term & alive[nxt]
    can = alive.copy()
    for _ in range(r_hold - 1):
        can = alive & np.any(same & can[nxt], axis=1)
    ok = can & alive & (mdp.depth + r_hold - 1 < mdp.horizon)
    inv = {v: k for k, v in abs_id.items()}
    return {inv[int(i)] for i in np.unique(sid[ok])}


def reachable_abstract_states(mdp: EnumeratedMDP) -> set[AbstractState]:
    return {abstract(s, mdp.spec) for s in mdp.states if s.alive}


# -- abstract planning ----------------------------------------------------------


def abstract_value_iterate(model: AbstractModel, horizon: int | None = None,
                           rewards: dict[TransitionKey, float] | None = None,
                           start: AbstractState | None = None,
                           terminal: set[AbstractState] | frozenset = frozenset()) -> tuple[float, list[TransitionKey]]:
    """Best plan over reliable actions treated as deterministic, with the option to stop.

    States in ``terminal`` end the episode on arrival, so nothing leaves them.
    Among equal-value plans the one with fewer hops wins, then the smaller key.
    """
    s0 = model.start_state if start is None else start
    known = sorted(model.known_set)
    h = len(known) + 1 if horizon is None else horizon
    edges = {s: [] if s in terminal else model.out_actions(s) for s in known}

    def r(key):
        return rewards[key] if rewards is not None else model.reward(key)

    # best[s] = (value, hops, first key) with `steps` transitions remaining
    best = {s: (0.0, 0, None) for s in known}
    tables = [best]
    for _ in range(h):
        new = {}
        for s in known:
            cand = (0.0, 0, None)
            for key in edges[s]:
                nv, nh, _ = best.get(key.dst, (0.0, 0, None))
                option = (r(key) + nv, nh + 1, key)
                if option[0] > cand[0] or (option[0] == cand[0] and option[1] < cand[1]):
                    cand = option
            new[s] = cand
        best = new
        tables.append(best)
    plan = []
    s = s0
    steps = h
    while steps > 0 and s in tables[steps]:
        _, _, key = tables[steps][s]
        if key is None:
            break
        plan.append(key)
        s = key.dst
        steps -= 1
    value = tables[h][s0][0] if s0 in tables[h] else 0.0
    return value, plan
