"""Goal-conditioned skill learners.

A skill is a dueling action-value function ``Q(x, a) = A(x, a) + V(x)`` over
sparse binary features, trained with double-estimator TD targets clipped to
``[0, R_hold]``, a count-based exploration bonus, a saw-tooth epsilon schedule
and self-imitation on successful trajectories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import (
    DOOR_GLYPHS,
    FALL,
    HAZARD,
    N_ACTIONS,
    WALL,
    AbstractState,
    ConcreteState,
    MapSpec,
    abstract,
)


@dataclass
class LearnerConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    target_sync_every: int = 75
    grad_clip_norm: float = 3.0
    beta: float = 0.63
    margin_lambda: float = 0.5
    epsilon_min: float = 0.01
    epsilon_max: float = 1.0
    phase0_len: int = 10
    buffer_size: int = 5000
    min_buffer: int = 50
    r_hold: int = 4
    learner: str = "linear"  # or "tabular"
    gamma: float = 0.95  # bootstrap discount; 1.0 lets count bonuses saturate looping actions

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "target_sync_every", "grad_clip_norm", "beta",
                     "margin_lambda", "epsilon_min", "epsilon_max", "phase0_len", "buffer_size", "r_hold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epsilon_min >= self.epsilon_max:
            raise ValueError("epsilon_min must be below epsilon_max")


# ---------------------------------------------------------------------------
# closed-form pieces


def epsilon(episode_index: int, cfg: LearnerConfig) -> float:
    """Saw-tooth schedule: linear decay over phases of length phase0_len * 2**k."""
    length, start = cfg.phase0_len, 0
    while episode_index >= start + length:
        start += length
        length *= 2
    t = episode_index - start
    return cfg.epsilon_max - (t / length) * (cfg.epsilon_max - cfg.epsilon_min)


def phase_starts(cfg: LearnerConfig, n: int) -> list[int]:
    out, start, length = [], 0, cfg.phase0_len
    while len(out) < n:
        out.append(start)
        start += length
        length *= 2
    return out


def count_bonus(visits: int, beta: float) -> float:
    return beta / math.sqrt(visits)


def double_q_targets(rewards, terminal, next_q_online, next_q_target, r_hold: float, gamma: float = 1.0) -> np.ndarray:
    """Action chosen by the online estimate, valued by the target estimate, clipped to [0, r_hold]."""
    rewards = np.asarray(rewards, dtype=float)
    a_star = np.argmax(next_q_online, axis=1)
    boot = np.take_along_axis(np.asarray(next_q_target, dtype=float), a_star[:, None], axis=1)[:, 0]
    boot = np.where(np.asarray(terminal, dtype=bool), 0.0, boot)
    return np.clip(rewards + gamma * boot, 0.0, r_hold)


def reward_to_go(rewards) -> np.ndarray:
    return np.cumsum(np.asarray(rewards, dtype=float)[::-1])[::-1]


def margin_loss(q_row, expert_action: int, lam: float) -> float:
    q_row = np.asarray(q_row, dtype=float)
    bonus = np.full(q_row.shape, lam)
    bonus[expert_action] = 0.0
    return float(np.max(q_row + bonus) - q_row[expert_action])


# ---------------------------------------------------------------------------
# features


def _mix(v: int) -> int:
    """Deterministic integer hash (splitmix64 finaliser)."""
    v = (v + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    v = ((v ^ (v >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    v = ((v ^ (v >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return v ^ (v >> 31)


class Featurizer:
    """Sparse binary features for (concrete state, destination, hold count).

    ``__call__`` returns the active feature indices as an int array of fixed
    length (``n_active``), so batches stack into 2-D arrays. Each index is a
    one-hot over a joint group: the blind variant has one group (bucket
    offset to dst, inventory match, hold count); the full variant adds the
    cell offset to dst, the local 5x5 occupancy pattern, the nearest monster's
    offset and phase, and the inventory bitmask.
    """

    OCC_RADIUS = 2
    OCC_BUCKETS = 4096
    INV_BUCKETS = 1024
    MON_CLIP = 3

    def __init__(self, spec: MapSpec, blind: bool, r_hold: int = 4):
        self.spec = spec
        self.blind = blind
        self.r_hold = r_hold
        b = spec.bucket_size
        self.clip = min(2 * b, 8)
        nh = r_hold + 1
        if blind:
            self._joint = (5, 5, 2, nh)
            self.dim = 5 * 5 * 2 * nh + 1
            self.n_active = 2
            return
        self.rel_lo, self.rel_n = -self.clip, b + 2 * self.clip
        self._joint = (self.rel_n, self.rel_n, 2, nh)
        off = self.rel_n * self.rel_n * 2 * nh
        self.off_coarse = off
        off += 49 * nh
        self.off_occ = off
        off += self.OCC_BUCKETS
        m = 2 * self.MON_CLIP + 1
        self.max_period = max((mm.period for mm in spec.monsters), default=1)
        self.n_mon = (m * m + 1) * (self.max_period + 1)
        self.off_mon = off
        off += self.n_mon
        self.n_items = max(spec.n_items, 1)
        self.off_inv = off
        off += self.INV_BUCKETS if self.n_items > 10 else 2**self.n_items
        self.off_bias = off
        self.dim = off + 1
        self.n_active = 6
        self._occ_class = self._occupancy_table()

    def _occupancy_table(self):
        spec = self.spec
        table = {}
        for y, row in enumerate(spec.grid):
            for x, c in enumerate(row):
                if c == WALL:
                    k = 1
                elif c == HAZARD:
                    k = 2
                elif c == FALL:
                    k = 3
                elif c in DOOR_GLYPHS:
                    k = 4
                elif (x, y) in spec.items:
                    k = 5
                else:
                    k = 0
                table[(x, y)] = k
        return table

    def __call__(self, x: ConcreteState, dst: AbstractState, hold: int = 0) -> np.ndarray:
        spec = self.spec
        b = spec.bucket_size
        hold = min(hold, self.r_hold)
        inv_match = int(x.inventory == dst.inventory)
        ax, ay = x.agent_pos
        if self.blind:
            cur = abstract(x, spec)
            dbx = min(2, max(-2, dst.bx - cur.bx)) + 2
            dby = min(2, max(-2, dst.by - cur.by)) + 2
            j = ((dbx * 5 + dby) * 2 + inv_match) * (self.r_hold + 1) + hold
            return np.array([j, self.dim - 1], dtype=np.int64)
        lo, n = self.rel_lo, self.rel_n
        nh = self.r_hold + 1
        rx = min(n - 1, max(0, ax - dst.bx * b - lo))
        ry = min(n - 1, max(0, ay - dst.by * b - lo))
        out = [((rx * n + ry) * 2 + inv_match) * nh + hold]
        cbx = min(3, max(-3, dst.bx - ax // b)) + 3
        cby = min(3, max(-3, dst.by - ay // b)) + 3
        out.append(self.off_coarse + (cbx * 7 + cby) * nh + hold)
        r = self.OCC_RADIUS
        occ = self._occ_class
        code = 0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                k = occ.get((ax + dx, ay + dy), 1)
                if k == 5 and (x.inventory >> spec.items[(ax + dx, ay + dy)]) & 1:
                    k = 0
                elif k == 4 and (x.inventory >> DOOR_GLYPHS.index(spec.grid[ay + dy][ax + dx])) & 1:
                    k = 0
                code = code * 6 + k
        out.append(self.off_occ + _mix(code) % self.OCC_BUCKETS)
        mc = self.MON_CLIP
        m = 2 * mc + 1
        best, phase = None, self.max_period
        for mon, p in zip(spec.monsters, x.monster_phases):
            mx, my = mon.position(p)
            d = abs(mx - ax) + abs(my - ay)
            if best is None or d < best[0]:
                best, phase = (d, mx - ax, my - ay), p
        if best is None or abs(best[1]) > mc or abs(best[2]) > mc:
            rel = m * m
        else:
            rel = (best[1] + mc) * m + best[2] + mc
        out.append(self.off_mon + rel * (self.max_period + 1) + phase)
        inv = x.inventory
        out.append(self.off_inv + (_mix(inv) % self.INV_BUCKETS if self.n_items > 10 else inv))
        out.append(self.off_bias)
        return np.array(out, dtype=np.int64)

    def dense(self, idx: np.ndarray) -> np.ndarray:
        v = np.zeros(self.dim)
        v[idx] = 1.0
        return v


def featurize(x: ConcreteState, dst: AbstractState, blind: bool, spec: MapSpec, hold: int = 0) -> np.ndarray:
    """Dense feature vector; convenience wrapper over :class:`Featurizer`."""
    f = Featurizer(spec, blind)
    return f.dense(f(x, dst, hold))


# ---------------------------------------------------------------------------
# value functions


class LinearQ:
    """Dueling linear Q over sparse binary features, trained with Adam."""

    def __init__(self, dim: int, lr: float = 1e-3, n_actions: int = N_ACTIONS):
        self.dim = dim
        self.lr = lr
        self.adv = np.zeros((dim, n_actions))
        self.val = np.zeros(dim)
        self._m = [np.zeros_like(self.adv), np.zeros_like(self.val)]
        self._v = [np.zeros_like(self.adv), np.zeros_like(self.val)]
        self._t = 0

    def encode(self, idx: np.ndarray) -> np.ndarray:
        return idx

    def q(self, idx: np.ndarray) -> np.ndarray:
        return self.adv[idx].sum(axis=0) + self.val[idx].sum()

    def q_batch(self, idx: np.ndarray) -> np.ndarray:
        return self.adv[idx].sum(axis=1) + self.val[idx].sum(axis=1)[:, None]

    def params(self) -> list[np.ndarray]:
        return [self.adv, self.val]

    def copy_params_from(self, other: "LinearQ") -> None:
        self.adv = other.adv.copy()
        self.val = other.val.copy()

    def regression_grad(self, idx, actions, targets):
        """Loss mean((Q(x,a) - y)^2) and its gradients."""
        q = self.q_batch(idx)
        rows = np.arange(len(actions))
        err = q[rows, actions] - targets
        loss = float(np.mean(err * err))
        g = 2.0 * err / len(actions)
        g_adv = np.zeros_like(self.adv)
        g_val = np.zeros_like(self.val)
        k = idx.shape[1]
        np.add.at(g_adv, (idx.ravel(), np.repeat(actions, k)), np.repeat(g, k))
        np.add.at(g_val, idx.ravel(), np.repeat(g, k))
        return loss, [g_adv, g_val]

    def margin_grad(self, idx, expert, lam):
        """Loss mean(max_a[Q + lam*1(a != a_E)] - Q(x, a_E)) and its (sub)gradients."""
        q = self.q_batch(idx)
        rows = np.arange(len(expert))
        aug = q + lam
        aug[rows, expert] -= lam
        a_max = np.argmax(aug, axis=1)
        loss = float(np.mean(aug[rows, a_max] - q[rows, expert]))
        g_adv = np.zeros_like(self.adv)
        k = idx.shape[1]
        scale = 1.0 / len(expert)
        np.add.at(g_adv, (idx.ravel(), np.repeat(a_max, k)), scale)
        np.add.at(g_adv, (idx.ravel(), np.repeat(expert, k)), -scale)
        return loss, [g_adv, np.zeros_like(self.val)]

    def apply(self, grads, clip_norm: float | None = None) -> float:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if clip_norm is not None and norm > clip_norm:
            grads = [g * (clip_norm / norm) for g in grads]
        self._t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        c1 = 1 - b1 ** self._t
        c2 = 1 - b2 ** self._t
        for p, g, m, v in zip(self.params(), grads, self._m, self._v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + eps)
        return norm

    def param_hash(self) -> int:
        return hash((self.adv.tobytes(), self.val.tobytes()))


class TabularQ(LinearQ):
    """One joint feature per distinct feature tuple: a table with the linear interface."""

    def __init__(self, dim: int = 0, lr: float = 1e-3, n_actions: int = N_ACTIONS, capacity: int = 256):
        super().__init__(capacity, lr, n_actions)
        self._rows: dict[bytes, int] = {}

    def encode(self, idx: np.ndarray) -> np.ndarray:
        key = np.asarray(idx, dtype=np.int64).tobytes()
        row = self._rows.get(key)
        if row is None:
            row = len(self._rows)
            self._rows[key] = row
            if row >= self.adv.shape[0]:
                self._grow()
        return np.array([row], dtype=np.int64)

    def _grow(self):
        n = self.adv.shape[0]
        pad = lambda a: np.concatenate([a, np.zeros((n,) + a.shape[1:])])  # noqa: E731
        self.adv, self.val = pad(self.adv), pad(self.val)
        self._m = [pad(a) for a in self._m]
        self._v = [pad(a) for a in self._v]
        self.dim = self.adv.shape[0]

    def copy_params_from(self, other: "LinearQ") -> None:
        super().copy_params_from(other)
        self.dim = self.adv.shape[0]


# ---------------------------------------------------------------------------


class ReplayBuffer:
    def __init__(self, capacity: int, width: int):
        self.capacity = capacity
        self.idx = np.zeros((capacity, width), dtype=np.int64)
        self.next_idx = np.zeros((capacity, width), dtype=np.int64)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, idx, action, reward, next_idx, terminal):
        p = self._pos
        self.idx[p] = idx
        self.action[p] = action
        self.reward[p] = reward
        self.next_idx[p] = next_idx
        self.terminal[p] = terminal
        self._pos = (p + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int):
        j = rng.integers(0, self.size, size=n)
        return self.idx[j], self.action[j], self.reward[j], self.next_idx[j], self.terminal[j]


class FrozenSkillError(RuntimeError):
    pass


class Skill:
    """One goal-conditioned subpolicy with its own replay, counts and schedule."""

    def __init__(self, featurizer: Featurizer, cfg: LearnerConfig, rng: np.random.Generator):
        self.features = featurizer
        self.cfg = cfg
        self.rng = rng
        qcls = TabularQ if cfg.learner == "tabular" else LinearQ
        self.qfunc = qcls(featurizer.dim, cfg.learning_rate)
        self.target_qfunc = qcls(featurizer.dim, cfg.learning_rate)
        self.target_qfunc.copy_params_from(self.qfunc)
        width = 1 if cfg.learner == "tabular" else featurizer.n_active
        self.replay = ReplayBuffer(cfg.buffer_size, width)
        self.imitation_buffer: list[list[tuple[np.ndarray, int, float]]] = []
        self._imitation_steps: list[tuple[np.ndarray, int, float]] = []
        self.visit_counts: dict[AbstractState, int] = {}
        self.p_success = 0.0
        self.episodes_seen = 0
        self.n_updates = 0
        self.frozen = False
        self.blind = featurizer.blind

    def encode(self, x: ConcreteState, dst: AbstractState, hold: int) -> np.ndarray:
        return self.qfunc.encode(self.features(x, dst, hold))

    def epsilon(self, episode_index: int | None = None) -> float:
        if self.frozen:
            return 0.0
        return epsilon(self.episodes_seen if episode_index is None else episode_index, self.cfg)

    def greedy(self, idx: np.ndarray) -> int:
        return int(np.argmax(self.qfunc.q(idx)))

    def act(self, idx: np.ndarray, episode_index: int | None = None) -> int:
        eps = self.epsilon(episode_index)
        if eps > 0 and self.rng.random() < eps:
            return int(self.rng.integers(N_ACTIONS))
        return self.greedy(idx)

    def intrinsic_bonus(self, s: AbstractState) -> float:
        n = self.visit_counts.get(s, 0) + 1
        self.visit_counts[s] = n
        return count_bonus(n, self.cfg.beta)

    def observe(self, idx, action, reward, next_idx, terminal) -> float | None:
        """Store a transition; with probability 1 - p_success run one TD update."""
        if self.frozen:
            raise FrozenSkillError("frozen skills do not learn")
        self.replay.add(idx, action, reward, next_idx, terminal)
        if len(self.replay) < self.cfg.min_buffer:
            return None
        if self.rng.random() >= 1.0 - self.p_success:
            return None
        return self.update(self.replay.sample(self.rng, self.cfg.batch_size))

    def td_targets(self, rewards, next_idx, terminal) -> np.ndarray:
        return double_q_targets(
            rewards, terminal, self.qfunc.q_batch(next_idx), self.target_qfunc.q_batch(next_idx), self.cfg.r_hold, self.cfg.gamma
        )

    def update(self, batch) -> float:
        if self.frozen:
            raise FrozenSkillError("frozen skills do not learn")
        idx, actions, rewards, next_idx, terminal = batch
        targets = self.td_targets(rewards, next_idx, terminal)
        loss, grads = self.qfunc.regression_grad(idx, actions, targets)
        self.qfunc.apply(grads, self.cfg.grad_clip_norm)
        self.n_updates += 1
        if self.n_updates % self.cfg.target_sync_every == 0:
            self.target_qfunc.copy_params_from(self.qfunc)
        return loss

    def self_imitate(self, trajectory: list[tuple[np.ndarray, int, float]]) -> float:
        """Add a successful trajectory of (features, action, intrinsic reward) and run one imitation update."""
        if self.frozen:
            raise FrozenSkillError("frozen skills do not learn")
        total = sum(r for _, _, r in trajectory)
        if total < self.cfg.r_hold:
            raise ValueError(f"trajectory is not successful: intrinsic sum {total} < {self.cfg.r_hold}")
        self.imitation_buffer.append(trajectory)
        g = np.minimum(reward_to_go([r for _, _, r in trajectory]), self.cfg.r_hold)
        self._imitation_steps.extend((f, a, gt) for (f, a, _), gt in zip(trajectory, g))
        del self._imitation_steps[: -self.cfg.buffer_size]
        return self.imitation_update()

    def imitation_update(self, gated: bool = True) -> float:
        """One imitation step on sampled successful steps; like TD updates it runs with probability 1 - p_success."""
        if not self.imitation_buffer:
            return 0.0
        if gated and self.rng.random() >= 1.0 - self.p_success:
            return 0.0
        steps = self._imitation_steps
        pick = self.rng.integers(0, len(steps), size=min(self.cfg.batch_size, len(steps)))
        idx = np.stack([steps[i][0] for i in pick])
        acts = np.array([steps[i][1] for i in pick], dtype=np.int64)
        g = np.array([steps[i][2] for i in pick], dtype=float)
        l1, g1 = self.qfunc.regression_grad(idx, acts, g)
        l2, g2 = self.qfunc.margin_grad(idx, acts, self.cfg.margin_lambda)
        self.qfunc.apply([a + b for a, b in zip(g1, g2)], self.cfg.grad_clip_norm)
        return l1 + l2

    def freeze(self) -> None:
        self.frozen = True
        self.replay = ReplayBuffer(1, self.replay.idx.shape[1])
        self.imitation_buffer = []
        self._imitation_steps = []

    def unfreeze(self) -> None:
        self.frozen = False
        self.replay = ReplayBuffer(self.cfg.buffer_size, self.replay.idx.shape[1])
