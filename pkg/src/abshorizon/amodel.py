"""The growing abstract MDP: known set, reliable actions, candidates and estimates."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .env import AbstractState

SNAPSHOT_HEADER = "abshorizon-model v1"


class TransitionKey(NamedTuple):
    src: AbstractState
    dst: AbstractState

    def __str__(self) -> str:
        return f"{self.src} -> {self.dst}"


@dataclass
class TransitionStats:
    window: deque
    n_succ: int = 0
    n_fail: int = 0
    distance: int = 1
    reward_estimate: float | None = None
    skill_index: int | None = None
    reliable: bool = False

    @property
    def p_hat(self) -> float:
        return sum(self.window) / len(self.window) if self.window else 0.0


@dataclass
class ModelParams:
    n_transition: int = 100
    delta: float = 0.05
    min_window: int = 20
    d_max: int = 15


def hoeffding_window(alpha: float, fail_prob: float) -> int:
    """Smallest N with 2 exp(-2 N alpha^2) <= fail_prob."""
    if not 0 < alpha < 1 or not 0 < fail_prob <= 1:
        raise ValueError("need 0 < alpha < 1 and 0 < fail_prob <= 1")
    n = max(1, math.ceil(math.log(2.0 / fail_prob) / (2.0 * alpha * alpha)))
    # guard against floating-point error in the closed form
    while n > 1 and 2.0 * math.exp(-2.0 * (n - 1) * alpha * alpha) <= fail_prob:
        n -= 1
    while 2.0 * math.exp(-2.0 * n * alpha * alpha) > fail_prob:
        n += 1
    return n


class AbstractModel:
    def __init__(self, start_state: AbstractState, params: ModelParams | None = None):
        self.params = params or ModelParams()
        self.start_state = start_state
        self.known_set: set[AbstractState] = {start_state}
        self.actions: set[TransitionKey] = set()
        self.candidates: dict[TransitionKey, TransitionStats] = {}
        self.visit_count: dict[AbstractState, int] = {}
        self._by_src: dict[AbstractState, set[TransitionKey]] = {}
        self._by_dst: dict[AbstractState, set[TransitionKey]] = {}
        # keys removed from the action set by the last record_attempt call
        self.demoted: list[TransitionKey] = []
        # every key that has ever been reliable; unlike `actions` it never shrinks
        self.ever_learned: set[TransitionKey] = set()

    # -- candidates -------------------------------------------------------

    def _new_stats(self, distance: int) -> TransitionStats:
        return TransitionStats(window=deque(maxlen=self.params.n_transition), distance=distance)

    def _insert(self, key: TransitionKey, distance: int) -> bool:
        stats = self.candidates.get(key)
        if stats is None:
            self.candidates[key] = self._new_stats(distance)
            self._by_src.setdefault(key.src, set()).add(key)
            self._by_dst.setdefault(key.dst, set()).add(key)
            return True
        if distance < stats.distance:
            stats.distance = distance
        return False

    def add_candidates(self, observed: Iterable[Iterable[AbstractState]]) -> int:
        """Add every pair (s_i, s_j), i < j, j - i <= d_max from each observed sequence."""
        d_max = self.params.d_max
        added = 0
        for seq in observed:
            collapsed: list[AbstractState] = []
            for s in seq:
                if not collapsed or collapsed[-1] != s:
                    collapsed.append(s)
            best: dict[TransitionKey, int] = {}
            n = len(collapsed)
            for i in range(n):
                si = collapsed[i]
                for j in range(i + 1, min(n, i + d_max + 1)):
                    sj = collapsed[j]
                    if sj == si:
                        continue
                    key = TransitionKey(si, sj)
                    d = j - i
                    if d < best.get(key, d + 1):
                        best[key] = d
            for key, d in best.items():
                added += self._insert(key, d)
        return added

    # -- attempts and rewards -------------------------------------------

    def record_attempt(self, key: TransitionKey, success: bool) -> float:
        stats = self.candidates.get(key)
        if stats is None:
            raise KeyError(f"unknown transition {key}")
        stats.window.append(1 if success else 0)
        if success:
            stats.n_succ += 1
        else:
            stats.n_fail += 1
        p = stats.p_hat
        stats.reliable = len(stats.window) >= self.params.min_window and p >= 1.0 - self.params.delta
        self.demoted = []
        if stats.reliable and key not in self.actions:
            self.actions.add(key)
            self.ever_learned.add(key)
            if key.src in self.known_set:
                self._refresh_known()
        elif not stats.reliable and key in self.actions:
            self.actions.discard(key)
            self.demoted = [key]
            self._refresh_known()
        return p

    def record_outcome(self, key: TransitionKey, success: bool) -> None:
        """Count an exploratory attempt in the totals without touching the reliability window."""
        stats = self.candidates[key]
        if success:
            stats.n_succ += 1
        else:
            stats.n_fail += 1

    def record_reward(self, key: TransitionKey, extrinsic: float) -> None:
        stats = self.candidates[key]
        if stats.reward_estimate is None:
            stats.reward_estimate = float(extrinsic)

    def reward(self, key: TransitionKey) -> float:
        r = self.candidates[key].reward_estimate
        return 0.0 if r is None else r

    def _refresh_known(self) -> None:
        self.known_set = self.reachable_from(self.start_state)

    def out_actions(self, s: AbstractState) -> list[TransitionKey]:
        return sorted(k for k in self._by_src.get(s, ()) if k in self.actions)

    def reachable_from(self, s0: AbstractState) -> set[AbstractState]:
        seen = {s0}
        frontier = [s0]
        while frontier:
            s = frontier.pop()
            for k in self._by_src.get(s, ()):
                if k in self.actions and k.dst not in seen:
                    seen.add(k.dst)
                    frontier.append(k.dst)
        return seen

    # -- derived views ----------------------------------------------------

    def novel_states(self, n_visit: int) -> set[AbstractState]:
        return {s for s in self.known_set if self.visit_count.get(s, 0) < n_visit}

    def visit(self, s: AbstractState, n: int = 1) -> None:
        self.visit_count[s] = self.visit_count.get(s, 0) + n

    def is_bottleneck(self, key: TransitionKey) -> bool:
        if key not in self.candidates:
            raise KeyError(f"unknown transition {key}")
        if any(k != key for k in self._by_dst.get(key.dst, ())):
            return False
        for k in self._by_src.get(key.dst, ()):
            if all(into.src == key.dst for into in self._by_dst[k.dst]):
                return True
        return False

    # -- persistence ------------------------------------------------------

    def __eq__(self, other) -> bool:
        return isinstance(other, AbstractModel) and serialize(self) == serialize(other)

    __hash__ = None


def _num(v: float | None) -> str:
    return "none" if v is None else f"{v:.6g}"


def _state(text: str) -> AbstractState:
    t = text.strip()
    if not (t.startswith("(") and t.endswith(")")):
        raise ValueError(f"malformed abstract state {text!r}")
    parts = t[1:-1].split(",")
    if len(parts) != 4:
        raise ValueError(f"malformed abstract state {text!r}")
    return AbstractState(*(int(p) for p in parts))


def _stats_line(key: TransitionKey, st: TransitionStats, with_skill: bool) -> str:
    fields = [
        f"p_hat={_num(st.p_hat)}",
        f"r_hat={_num(st.reward_estimate)}",
        f"d={st.distance}",
        f"n_succ={st.n_succ}",
        f"n_fail={st.n_fail}",
    ]
    if with_skill:
        fields.append(f"skill={'none' if st.skill_index is None else st.skill_index}")
    fields.append("window=" + ("".join(str(b) for b in st.window) or "-"))
    return f"  {key} | " + " ".join(fields)


def serialize(model: AbstractModel, extra_sections: dict[str, list[str]] | None = None) -> str:
    p = model.params
    lines = [SNAPSHOT_HEADER]
    lines.append(f"params: n_transition={p.n_transition} delta={p.delta!r} min_window={p.min_window} d_max={p.d_max}")
    lines.append(f"start: {model.start_state}")
    lines.append("states:")
    lines += [f"  {s}" for s in sorted(model.known_set)]
    lines.append("actions:")
    lines += [_stats_line(k, model.candidates[k], True) for k in sorted(model.actions)]
    lines.append("candidates:")
    lines += [_stats_line(k, st, False) for k, st in sorted(model.candidates.items()) if k not in model.actions]
    lines.append("visits:")
    lines += [f"  {s}: {n}" for s, n in sorted(model.visit_count.items())]
    for name, body in (extra_sections or {}).items():
        lines.append(f"{name}:")
        lines += [f"  {b}" for b in body]
    return "\n".join(lines) + "\n"


def _parse_stats(line: str, model: AbstractModel) -> tuple[TransitionKey, TransitionStats]:
    head, _, tail = line.partition("|")
    src, _, dst = head.partition("->")
    key = TransitionKey(_state(src), _state(dst))
    vals = dict(tok.split("=", 1) for tok in tail.split())
    st = model._new_stats(int(vals["d"]))
    st.n_succ, st.n_fail = int(vals["n_succ"]), int(vals["n_fail"])
    st.reward_estimate = None if vals["r_hat"] == "none" else float(vals["r_hat"])
    st.skill_index = None if vals.get("skill", "none") == "none" else int(vals["skill"])
    w = vals.get("window", "-")
    st.window.extend(int(c) for c in w if c in "01")
    p = model.params
    st.reliable = len(st.window) >= p.min_window and st.p_hat >= 1.0 - p.delta
    return key, st


def split_sections(text: str) -> tuple[str, dict[str, list[str]]]:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty snapshot")
    header = lines[0].strip()
    sections: dict[str, list[str]] = {}
    current = None
    for raw in lines[1:]:
        if not raw.strip():
            continue
        if raw.startswith("  "):
            if current is None:
                raise ValueError(f"indented line outside a section: {raw!r}")
            sections[current].append(raw[2:])
        else:
            name, _, value = raw.partition(":")
            current = name.strip()
            sections[current] = [value.strip()] if value.strip() else []
    return header, sections


def deserialize(text: str) -> AbstractModel:
    header, sec = split_sections(text)
    if header != SNAPSHOT_HEADER:
        raise ValueError(f"unsupported snapshot version {header!r}, expected {SNAPSHOT_HEADER!r}")
    try:
        pv = dict(tok.split("=", 1) for tok in sec["params"][0].split())
        params = ModelParams(int(pv["n_transition"]), float(pv["delta"]), int(pv["min_window"]), int(pv["d_max"]))
        model = AbstractModel(_state(sec["start"][0]), params)
        for line in sec.get("candidates", []) + sec.get("actions", []):
            key, st = _parse_stats(line, model)
            model._insert(key, st.distance)
            model.candidates[key] = st
        model.actions = {_parse_stats(line, model)[0] for line in sec.get("actions", [])}
        model.known_set = {_state(s) for s in sec.get("states", [])}
        for line in sec.get("visits", []):
            s, _, n = line.rpartition(":")
            model.visit_count[_state(s)] = int(n)
    except (KeyError, IndexError, ValueError) as exc:
        raise ValueError(f"malformed snapshot: {exc}") from exc
    if model.start_state not in model.known_set:
        raise ValueError("malformed snapshot: start state missing from states")
    model.ever_learned = set(model.actions)
    return model
