"""GridQuest: a deterministic multi-room grid game and its state abstraction.

The map is plain ASCII, one glyph per cell, followed by a key-value trailer::

    ########
    #S..a..#
    ########

    bucket_size: 4
    room: 8x3
    reward: a=100 T=1000 hazard=-1
    monster: id=0 path=(3,1),(4,1) period=2
    sticky: 0.0
    horizon: 1000

Dynamics live in the pure function :func:`transition`; :class:`GridQuest`
wraps it with sticky actions, a frame counter and snapshot/restore.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import NamedTuple

import numpy as np

WALL, FLOOR, HAZARD, FALL = "#", ".", "x", "F"
GLYPHS = set("#.STxFmabcdABCD")
KEY_GLYPHS = "abcd"
DOOR_GLYPHS = "ABCD"
N_KEY_IDS = 4  # treasures take item ids 4, 5, ... in reading order


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4


N_ACTIONS = len(Action)
_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))


class MapError(ValueError):
    pass


class BudgetExhausted(RuntimeError):
    """Raised when a step or charge would exceed the environment's frame limit."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract (e.g. stepping a terminal state)."""


class ConcreteState(NamedTuple):
    agent_pos: tuple[int, int]
    inventory: int
    monster_phases: tuple[int, ...]
    fall_height: int
    step_count: int
    last_action: int | None
    alive: bool


class AbstractState(NamedTuple):
    bx: int
    by: int
    room: int
    inventory: int

    def __str__(self) -> str:
        return f"({self.bx},{self.by},{self.room},{self.inventory})"


@dataclass(frozen=True)
class Monster:
    path: tuple[tuple[int, int], ...]
    period: int

    def position(self, phase: int) -> tuple[int, int]:
        return self.path[phase % len(self.path)]


@dataclass(frozen=True, eq=False)
class MapSpec:
    grid: tuple[str, ...]
    room_width: int
    room_height: int
    monsters: tuple[Monster, ...] = ()
    bucket_size: int = 4
    item_rewards: dict = field(default_factory=dict)  # item id -> reward
    hazard_reward: float = -1.0
    sticky_prob: float = 0.0
    horizon: int = 1000
    # transfer tasks: cells that end the episode with goal_reward on entry
    goal_cells: frozenset = frozenset()
    goal_reward: float = 0.0

    def __post_init__(self):
        _validate(self)
        start = [(x, y) for y, row in enumerate(self.grid) for x, c in enumerate(row) if c == "S"]
        items, doors = {}, {}
        next_treasure = N_KEY_IDS
        for y, row in enumerate(self.grid):
            for x, c in enumerate(row):
                if c in KEY_GLYPHS:
                    items[(x, y)] = KEY_GLYPHS.index(c)
                elif c == "T":
                    items[(x, y)] = next_treasure
                    next_treasure += 1
                elif c in DOOR_GLYPHS:
                    doors[(x, y)] = DOOR_GLYPHS.index(c)
        object.__setattr__(self, "start", start[0])
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "doors", doors)
        object.__setattr__(self, "n_items", max(next_treasure, 1 + max(items.values(), default=-1)))
        object.__setattr__(self, "_fall", _fall_table(self.grid))

    @property
    def width(self) -> int:
        return len(self.grid[0])

    @property
    def height(self) -> int:
        return len(self.grid)

    @property
    def rooms_per_row(self) -> int:
        return self.width // self.room_width

    @property
    def n_rooms(self) -> int:
        return self.rooms_per_row * (self.height // self.room_height)

    def glyph(self, x: int, y: int) -> str:
        return self.grid[y][x]

    def count(self, glyphs: str) -> int:
        return sum(row.count(g) for row in self.grid for g in glyphs)

    def item_reward(self, item: int) -> float:
        return float(self.item_rewards.get(item, 0.0))

    @property
    def fingerprint(self) -> str:
        """Digest of everything that determines dynamics (not rewards, not bucketing)."""
        h = hashlib.sha1()
        h.update("\n".join(self.grid).encode())
        h.update(repr((self.room_width, self.room_height, self.monsters, self.horizon)).encode())
        return h.hexdigest()[:16]

    def with_changes(self, **changes) -> "MapSpec":
        return replace(self, **changes)


def _validate(spec: MapSpec) -> None:
    if not spec.grid:
        raise MapError("empty grid")
    w = len(spec.grid[0])
    for i, row in enumerate(spec.grid):
        if len(row) != w:
            raise MapError(f"non-rectangular grid: line {i + 1} has {len(row)} cells, expected {w}")
    n_start = sum(row.count("S") for row in spec.grid)
    if n_start != 1:
        raise MapError(f"expected exactly one start glyph 'S', found {n_start}")
    if spec.bucket_size < 1:
        raise MapError("bucket_size must be >= 1")
    if spec.room_width < 1 or spec.room_height < 1:
        raise MapError("room dimensions must be positive")
    if w % spec.room_width or len(spec.grid) % spec.room_height:
        raise MapError(f"room {spec.room_width}x{spec.room_height} does not tile grid {w}x{len(spec.grid)}")
    if spec.bucket_size > min(spec.room_width, spec.room_height):
        raise MapError(f"bucket_size {spec.bucket_size} exceeds room size {spec.room_width}x{spec.room_height}")
    if not 0.0 <= spec.sticky_prob <= 1.0:
        raise MapError("sticky probability must lie in [0, 1]")
    if spec.horizon < 1:
        raise MapError("horizon must be positive")
    for i, m in enumerate(spec.monsters):
        if m.period < 1 or not m.path:
            raise MapError(f"monster {i}: empty path or non-positive period")
        for x, y in m.path:
            if not (0 <= x < w and 0 <= y < len(spec.grid)) or spec.grid[y][x] == WALL:
                raise MapError(f"monster {i}: waypoint ({x},{y}) is outside the grid or on a wall")


def _fall_table(grid: tuple[str, ...]) -> dict[tuple[int, int], int]:
    """Forced steps remaining for every fall-zone cell (0 when the cell below is solid)."""
    table = {}
    h = len(grid)
    for y, row in enumerate(grid):
        for x, c in enumerate(row):
            if c != FALL:
                continue
            k, yy = 0, y + 1
            while yy < h and grid[yy][x] == FALL:
                k += 1
                yy += 1
            if yy < h and grid[yy][x] != WALL:
                k += 1
            table[(x, y)] = k
    return table


# ---------------------------------------------------------------------------
# parsing

_PAIR = re.compile(r"\((-?\d+),(-?\d+)\)")


def parse_kv(text: str) -> list[tuple[str, str]]:
    """Parse ``key: value`` lines, skipping blanks and ``#``-comments."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("//") or (line.startswith("#") and ":" not in line):
            continue
        if ":" not in line:
            raise MapError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, value = line.split(":", 1)
        out.append((key.strip(), value.strip()))
    return out


def parse_assignments(value: str) -> dict[str, str]:
    """``a=100 T=1000 hazard=-1`` -> dict; values may contain commas and parentheses."""
    out = {}
    for token in value.split():
        if "=" not in token:
            raise MapError(f"expected name=value, got {token!r}")
        k, v = token.split("=", 1)
        out[k] = v
    return out


def reward_overrides(assign: dict[str, str], rewards: dict[int, float], treasure_ids, hazard: float):
    rewards = dict(rewards)
    for k, v in assign.items():
        if k in KEY_GLYPHS:
            rewards[KEY_GLYPHS.index(k)] = float(v)
        elif k == "T":
            for tid in treasure_ids:
                rewards[tid] = float(v)
        elif k == "hazard":
            hazard = float(v)
        elif k != "goal":
            raise MapError(f"unknown reward target {k!r}")
    return rewards, hazard


def load_map(text: str, **overrides) -> MapSpec:
    """Parse map-file contents into a validated :class:`MapSpec`."""
    lines = text.splitlines()
    grid: list[str] = []
    i = 0
    while i < len(lines) and not lines[i].strip():
        i += 1
    while i < len(lines) and lines[i].strip() and ":" not in lines[i]:
        row = lines[i].rstrip()
        for col, c in enumerate(row, 1):
            if c not in GLYPHS:
                raise MapError(f"unknown glyph {c!r} at line {i + 1} col {col}")
        grid.append(row)
        i += 1
    if not grid:
        raise MapError("map has no grid")
    w = len(grid[0])
    for n, row in enumerate(grid, 1):
        if len(row) != w:
            raise MapError(f"non-rectangular grid at line {n} col {min(len(row), w) + 1}")
    starts = [(n, row.index("S") + 1) for n, row in enumerate(grid, 1) if "S" in row]
    n_start = sum(row.count("S") for row in grid)
    if n_start == 0:
        raise MapError("no start glyph 'S' at line 1 col 1")
    if n_start > 1:
        n, c = starts[-1] if len(starts) > 1 else starts[0]
        raise MapError(f"duplicate start glyph 'S' at line {n} col {c}")

    fields: dict = {"room_width": w, "room_height": len(grid), "bucket_size": 4}
    monsters: dict[int, Monster] = {}
    assign_rewards: dict[str, str] = {}
    for key, value in parse_kv("\n".join(lines[i:])):
        if key == "bucket_size":
            fields["bucket_size"] = int(value)
        elif key == "room":
            rw, rh = value.lower().split("x")
            fields["room_width"], fields["room_height"] = int(rw), int(rh)
        elif key == "sticky":
            fields["sticky_prob"] = float(value)
        elif key == "horizon":
            fields["horizon"] = int(value)
        elif key == "reward":
            assign_rewards.update(parse_assignments(value))
        elif key == "monster":
            a = parse_assignments(value)
            path = tuple((int(x), int(y)) for x, y in _PAIR.findall(a.get("path", "")))
            monsters[int(a.get("id", len(monsters)))] = Monster(path, int(a.get("period", len(path))))
        else:
            raise MapError(f"unknown trailer key {key!r}")

    treasure_ids = range(N_KEY_IDS, N_KEY_IDS + sum(r.count("T") for r in grid))
    rewards = {k: 100.0 for k in range(N_KEY_IDS)}
    rewards.update({t: 1000.0 for t in treasure_ids})
    rewards, hazard = reward_overrides(assign_rewards, rewards, treasure_ids, -1.0)
    fields.update(item_rewards=rewards, hazard_reward=hazard)
    fields["monsters"] = tuple(monsters[k] for k in sorted(monsters))
    fields.update(overrides)
    return MapSpec(grid=tuple(grid), **fields)


def load_map_file(path) -> MapSpec:
    with open(path, encoding="utf-8") as fh:
        return load_map(fh.read())


# ---------------------------------------------------------------------------
# dynamics


def reset(spec: MapSpec, seed: int = 0) -> ConcreteState:
    # seed only drives sticky actions, which live in GridQuest; reset itself is deterministic
    del seed
    return ConcreteState(spec.start, 0, tuple(0 for _ in spec.monsters), 0, 0, None, True)


def is_terminal(spec: MapSpec, state: ConcreteState) -> bool:
    return (not state.alive) or state.step_count >= spec.horizon or state.agent_pos in spec.goal_cells


def transition(spec: MapSpec, state: ConcreteState, action: int) -> tuple[ConcreteState, float, bool]:
    """Deterministic dynamics; ``action`` is the effective (post-sticky) action."""
    if is_terminal(spec, state):
        raise ContractError("step called on a terminal state")
    x, y = state.agent_pos
    grid = spec.grid
    inv = state.inventory
    if state.fall_height > 0:
        nx, ny = x, y + 1
    else:
        dx, dy = _MOVES[action]
        nx, ny = x + dx, y + dy
        if dx or dy:
            if not (0 <= nx < spec.width and 0 <= ny < spec.height):
                nx, ny = x, y
            else:
                c = grid[ny][nx]
                if c == WALL or (c == FALL and dy < 0):
                    nx, ny = x, y
                elif c in DOOR_GLYPHS and not inv >> DOOR_GLYPHS.index(c) & 1:
                    nx, ny = x, y
    pos = (nx, ny)
    reward = 0.0
    alive = True
    item = spec.items.get(pos)
    if item is not None and not inv >> item & 1:
        inv |= 1 << item
        reward += spec.item_reward(item)
    cell = grid[ny][nx]
    fall = spec._fall.get(pos, 0) if cell == FALL else 0
    if cell == HAZARD:
        alive = False
    phases = state.monster_phases
    if spec.monsters:
        new_phases = tuple((p + 1) % m.period for p, m in zip(phases, spec.monsters))
        if alive:
            for m, p0, p1 in zip(spec.monsters, phases, new_phases):
                old, new = m.position(p0), m.position(p1)
                if new == pos or (old == pos and new == (x, y)):
                    alive = False
                    break
        phases = new_phases
    if not alive:
        reward += spec.hazard_reward
        fall = 0
    elif pos in spec.goal_cells:
        reward += spec.goal_reward
    nxt = ConcreteState(pos, inv, phases, fall, state.step_count + 1, int(action), alive)
    return nxt, reward, is_terminal(spec, nxt)


def step(spec: MapSpec, state: ConcreteState, action: int, rng: np.random.Generator | None = None):
    """One environment step with sticky actions applied when ``rng`` is given."""
    if rng is not None and spec.sticky_prob > 0 and state.last_action is not None:
        if rng.random() < spec.sticky_prob:
            action = state.last_action
    return transition(spec, state, action)


def abstract(state: ConcreteState, spec: MapSpec) -> AbstractState:
    x, y = state.agent_pos
    b = spec.bucket_size
    room = (y // spec.room_height) * spec.rooms_per_row + x // spec.room_width
    return AbstractState(x // b, y // b, room, state.inventory)


def monster_positions(spec: MapSpec, state: ConcreteState) -> list[tuple[int, int]]:
    return [m.position(p) for m, p in zip(spec.monsters, state.monster_phases)]


# ---------------------------------------------------------------------------


class Snapshot(NamedTuple):
    fingerprint: str
    state: ConcreteState


class GridQuest:
    """Stateful episode runner with sticky actions and frame accounting.

    ``frames`` counts every simulated step plus frames charged for
    restore-based shortcuts (see :meth:`charge`).
    """

    def __init__(self, spec: MapSpec, seed: int = 0, frame_limit: int | None = None):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.frames = 0
        self.frame_limit = frame_limit
        self.state = reset(spec, seed)

    @property
    def deterministic(self) -> bool:
        return self.spec.sticky_prob == 0

    def reset(self) -> ConcreteState:
        self.state = reset(self.spec)
        return self.state

    def step(self, action: int) -> tuple[ConcreteState, float, bool]:
        if self.frame_limit is not None and self.frames >= self.frame_limit:
            raise BudgetExhausted(self.frames)
        self.state, reward, done = step(self.spec, self.state, action, self.rng)
        self.frames += 1
        return self.state, reward, done

    @property
    def done(self) -> bool:
        return is_terminal(self.spec, self.state)

    def abstract(self, state: ConcreteState | None = None) -> AbstractState:
        return abstract(self.state if state is None else state, self.spec)

    def snapshot(self) -> Snapshot:
        return Snapshot(self.spec.fingerprint, self.state)

    def restore(self, token: Snapshot) -> ConcreteState:
        if token.fingerprint != self.spec.fingerprint:
            raise ContractError("snapshot was taken on a different map")
        self.state = token.state
        return self.state

    def charge(self, frames: int) -> None:
        self.frames += int(frames)
        if self.frame_limit is not None and self.frames > self.frame_limit:
            self.frames = self.frame_limit
            raise BudgetExhausted(self.frames)
