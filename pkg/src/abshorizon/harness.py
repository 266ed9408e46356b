"""Seeded training runs, periodic evaluation, metrics CSVs, checkpoints and comparisons."""
from __future__ import annotations

import csv
import dataclasses
import gzip
import io
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baseline, oracle
from .amodel import AbstractModel, ModelParams, serialize
from .env import BudgetExhausted, GridQuest, MapError, MapSpec, load_map, parse_kv
from .manager import Manager, ManagerParams, execute_plan
from .skills import LearnerConfig
from .transfer import RewardTask, TransferResult, few_shot, load_task_file
from .worker import Worker, WorkerParams

METRICS_HEADER = ["seed", "episode", "frames", "known_states", "actions", "candidates", "skills", "eval_return"]
MAPS_DIR = Path(__file__).parent / "maps"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    map_path: str
    task_path: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    frame_budget: int = 2_000_000
    eval_every_episodes: int = 4000
    checkpoint_every_episodes: int = 0
    stop_at_coverage: bool = True
    # None picks 1 on sticky maps and 100 on deterministic ones
    lambda1: float | None = None
    lambda2: float = 5000.0
    lambda3: float = -2000.0
    t_d: int = 50
    n_visit: int = 500
    t_repeat: int = 20
    h_worker: int = 30
    delta: float = 0.05
    r_hold: int = 4
    d_max: int = 15
    n_transition: int = 100
    sticky: float | None = None
    bucket_size: int | None = None
    learning_rate: float = 0.001
    gamma: float = 0.95
    learner: str = "linear"

    def __post_init__(self):
        for name in ("frame_budget", "eval_every_episodes", "t_d", "n_visit", "t_repeat", "h_worker",
                     "r_hold", "d_max", "n_transition", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.checkpoint_every_episodes < 0:
            raise ConfigError("checkpoint_every_episodes must be non-negative")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.sticky is not None and not 0 <= self.sticky < 1:
            raise ConfigError("sticky must lie in [0, 1)")
        if self.bucket_size is not None and self.bucket_size <= 0:
            raise ConfigError("bucket_size must be positive")
        if self.learner not in ("linear", "tabular"):
            raise ConfigError(f"unknown learner {self.learner!r}")

    def load_spec(self) -> MapSpec:
        overrides = {}
        if self.sticky is not None:
            overrides["sticky_prob"] = self.sticky
        if self.bucket_size is not None:
            overrides["bucket_size"] = self.bucket_size
        try:
            with open(self.map_path, encoding="utf-8") as fh:
                return load_map(fh.read(), **overrides)
        except OSError as exc:
            raise ConfigError(f"cannot read map {self.map_path}: {exc}") from exc
        except MapError as exc:
            raise ConfigError(f"{self.map_path}: {exc}") from exc

    def selected_lambda1(self, spec: MapSpec) -> float:
        if self.lambda1 is not None:
            return self.lambda1
        return 1.0 if spec.sticky_prob > 0 else 100.0

    def build(self, spec: MapSpec, seed: int) -> tuple[GridQuest, Manager]:
        env = GridQuest(spec, seed, frame_limit=self.frame_budget)
        model = AbstractModel(env.abstract(), ModelParams(self.n_transition, self.delta, d_max=self.d_max))
        learner = LearnerConfig(learning_rate=self.learning_rate, gamma=self.gamma, r_hold=self.r_hold,
                                learner=self.learner)
        worker = Worker(spec, WorkerParams(h_worker=self.h_worker, r_hold=self.r_hold), learner,
                        np.random.default_rng(seed))
        mp = ManagerParams(self.selected_lambda1(spec), self.lambda2, self.lambda3, self.t_d, self.n_visit,
                           self.t_repeat)
        return env, Manager(env, model, worker, mp, np.random.default_rng(seed + 1000))


_INT_KEYS = {"frame_budget", "eval_every_episodes", "checkpoint_every_episodes", "t_d", "n_visit", "t_repeat",
             "h_worker", "r_hold", "d_max", "n_transition", "bucket_size"}
_FLOAT_KEYS = {"lambda1", "lambda2", "lambda3", "delta", "sticky", "learning_rate", "gamma"}
_ALIASES = {"map": "map_path", "task": "task_path", "eval_every": "eval_every_episodes",
            "checkpoint_every": "checkpoint_every_episodes"}


def _resolve(path: str, base: Path) -> str:
    p = Path(path)
    if p.is_absolute():
        return str(p)
    for cand in (base / p, MAPS_DIR / p):
        if cand.exists():
            return str(cand)
    return str(base / p)


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> RunConfig:
    """Build a config from ``key: value`` lines; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    values: dict = {}
    try:
        pairs = parse_kv(text)
    except MapError as exc:
        raise ConfigError(str(exc)) from exc
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for key, raw in pairs:
        name = _ALIASES.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if name in ("map_path", "task_path"):
                values[name] = _resolve(raw, base)
            elif name == "seeds":
                values[name] = [int(s) for s in raw.replace(",", " ").split()]
            elif name == "stop_at_coverage":
                values[name] = raw.lower() in ("1", "true", "yes")
            elif name == "lambda1" and raw == "auto":
                values[name] = None
            elif name in _INT_KEYS:
                values[name] = int(raw)
            elif name in _FLOAT_KEYS:
                values[name] = float(raw)
            else:
                values[name] = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    if "map_path" not in values:
        raise ConfigError("config needs a 'map' entry")
    return RunConfig(**values)


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, Path(path).parent)


# -- single-seed runs ---------------------------------------------------------------


def coverage_target(spec: MapSpec, r_hold: int = 4, limit: int = 200_000):
    """Abstract states that can be held, or None when the map is too large to enumerate."""
    try:
        return oracle.holdable_states(oracle.enumerate_states(spec, limit), r_hold)
    except oracle.StateLimitError:
        return None


def evaluate(model: AbstractModel, worker: Worker, env: GridQuest) -> float:
    """Return of the best abstract plan run greedily from a fresh episode."""
    _, plan = oracle.abstract_value_iterate(model)
    env.reset()
    achieved, _ = execute_plan(env, model, worker, plan)
    return achieved


@dataclass
class SeedRun:
    """Everything needed to continue a run; pickled as the checkpoint."""
    config: RunConfig
    seed: int
    spec: MapSpec
    env: GridQuest
    eval_env: GridQuest
    manager: Manager
    target: set | None
    rows: list[list] = field(default_factory=list)
    finished: bool = False
    covered: bool = False
    last_eval: float | None = None

    @property
    def model(self) -> AbstractModel:
        return self.manager.model

    @property
    def worker(self) -> Worker:
        return self.manager.worker

    def coverage(self) -> float:
        if not self.target:
            return float("nan")
        return len(self.model.known_set & self.target) / len(self.target)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


def _row(run: SeedRun, eval_return: float | None) -> list[str]:
    m = run.model
    # the actions column counts transitions ever learned, so it never drops on a demotion
    return [_fmt(v) for v in (run.seed, run.manager.episode, run.env.frames, len(m.known_set), len(m.ever_learned),
                              len(m.candidates), len(run.worker.inventory), eval_return)]


def start_run(config: RunConfig, seed: int, spec: MapSpec | None = None) -> SeedRun:
    spec = spec or config.load_spec()
    env, manager = config.build(spec, seed)
    eval_env = GridQuest(spec, seed + 10_000)
    target = coverage_target(spec, config.r_hold) if config.stop_at_coverage else None
    return SeedRun(config, seed, spec, env, eval_env, manager, target)


def advance(run: SeedRun, max_episodes: int | None = None) -> SeedRun:
    """Run episodes until the budget, coverage, a complete model, or ``max_episodes`` more episodes."""
    cfg = run.config
    done_here = 0
    while not run.finished and (max_episodes is None or done_here < max_episodes):
        stop = False
        try:
            rep = run.manager.run_episode()
        except BudgetExhausted:
            stop = True
            rep = None
        done_here += 1
        done_exploring = (rep is not None and rep.complete) or (
            run.target is not None and run.target <= run.model.known_set)
        if done_exploring and not stop:
            # a closing sweep re-tests every action; any demotion sends the run back to training
            try:
                done_exploring = run.manager.verify() == 0
            except BudgetExhausted:
                stop = True
        if done_exploring:
            stop = True
        if run.env.frame_limit is not None and run.env.frames >= run.env.frame_limit:
            stop = True
        eval_return = None
        if stop or run.manager.episode % cfg.eval_every_episodes == 0:
            eval_return = evaluate(run.model, run.worker, run.eval_env)
            run.last_eval = eval_return
        run.rows.append(_row(run, eval_return))
        run.finished = stop
        run.covered = stop and run.target is not None and run.target <= run.model.known_set
    return run


def write_metrics(run: SeedRun, path: str | os.PathLike) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(run.rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def snapshot_text(run: SeedRun) -> str:
    w = run.worker
    info = [f"seed={run.seed}", f"episode={run.manager.episode}", f"frames={run.env.frames}",
            f"map={run.config.map_path}", f"bucket_size={run.spec.bucket_size}", f"covered={run.covered}"]
    skills = [f"{i}: {'blind' if s.blind else 'full'} frozen={s.frozen} episodes={s.episodes_seen} "
              f"p_success={s.p_success:.3f} params={s.qfunc.param_hash():016x}"
              for i, s in enumerate(w.inventory.skills)]
    inventory = [f"{k} -> {p}" for k, p in sorted(w.inventory.index.items())]
    return serialize(run.model, {"run": info, "skills": skills, "inventory": inventory})


def save_checkpoint(run: SeedRun, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    path = out / f"snapshot_seed{run.seed}.pkl.gz"
    # skill weights are mostly zeros, so even the fastest compression level shrinks them ~100x
    with gzip.open(path, "wb", compresslevel=1) as fh:
        pickle.dump(run, fh, protocol=pickle.HIGHEST_PROTOCOL)
    (out / f"model_seed{run.seed}.txt").write_text(snapshot_text(run), encoding="utf-8")
    return path


def load_checkpoint(path: str | os.PathLike) -> SeedRun:
    try:
        with gzip.open(path, "rb") as fh:
            run = pickle.load(fh)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"snapshot {path} not found") from exc
    if not isinstance(run, SeedRun):
        raise ValueError(f"{path} is not a run snapshot")
    return run


def _drive(run: SeedRun, out: Path) -> SeedRun:
    every = run.config.checkpoint_every_episodes
    while not run.finished:
        advance(run, every or None)
        write_metrics(run, out / f"metrics_seed{run.seed}.csv")
        save_checkpoint(run, out)
    return run


def run_seed(config: RunConfig, seed: int, out_dir: str | os.PathLike, spec: MapSpec | None = None) -> SeedRun:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return _drive(start_run(config, seed, spec), out)


def resume(snapshot: str | os.PathLike, out_dir: str | os.PathLike | None = None) -> SeedRun:
    """Continue a run from its checkpoint; metrics rows after the checkpoint are regenerated."""
    run = load_checkpoint(snapshot)
    out = Path(out_dir) if out_dir is not None else Path(snapshot).parent
    out.mkdir(parents=True, exist_ok=True)
    return _drive(run, out)


def run(config: RunConfig, out_dir: str | os.PathLike) -> list[SeedRun]:
    spec = config.load_spec()
    return [run_seed(config, seed, out_dir, spec) for seed in config.seeds]


# -- bucket-size sweep --------------------------------------------------------------------


def scaled_config(config: RunConfig, scale: float) -> RunConfig:
    if scale <= 0:
        raise ConfigError("scales must be positive")
    spec = config.load_spec()
    bucket = int(round(spec.bucket_size * scale))
    if bucket < 1:
        raise ConfigError(f"scale {scale} shrinks the bucket below one cell")
    if bucket > min(spec.room_width, spec.room_height):
        raise ConfigError(f"scale {scale} gives bucket {bucket}, larger than the "
                          f"{spec.room_width}x{spec.room_height} room")
    h = max(1, int(round(config.h_worker * scale)))
    return dataclasses.replace(config, bucket_size=bucket, h_worker=h)


@dataclass
class SweepEntry:
    scale: float
    seed: int
    bucket_size: int
    h_worker: int
    frames: int
    coverage: float
    covered: bool
    final_eval: float | None


def sweep_buckets(config: RunConfig, scales: list[float], out_dir: str | os.PathLike) -> list[SweepEntry]:
    configs = [(s, scaled_config(config, s)) for s in scales]  # validate every scale before running any
    out = Path(out_dir)
    entries = []
    for scale, cfg in configs:
        for r in run(cfg, out / f"scale_{scale:g}"):
            entries.append(SweepEntry(scale, r.seed, r.spec.bucket_size, cfg.h_worker, r.env.frames,
                                      r.coverage(), r.covered, r.last_eval))
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scale", "seed", "bucket_size", "h_worker", "frames", "coverage", "covered", "final_eval"])
        for e in entries:
            w.writerow([f"{e.scale:g}", e.seed, e.bucket_size, e.h_worker, e.frames, _fmt(e.coverage),
                        int(e.covered), _fmt(e.final_eval)])
    return entries


# -- transfer and baseline --------------------------------------------------------------------


@dataclass
class TransferReport:
    task: str
    seed: int
    budget: int
    transfer: TransferResult
    baseline_budget: int
    baseline_curve: list[tuple[int, float]]
    oracle_value: float | None

    @property
    def baseline_best(self) -> float:
        return max((v for _, v in self.baseline_curve), default=0.0)

    @property
    def ratio(self) -> float:
        """Transfer return over the baseline's best return (inf when the baseline scores nothing)."""
        b = self.baseline_best
        if b > 0:
            return self.transfer.achieved_return / b
        return float("inf") if self.transfer.achieved_return > 0 else float("nan")


def oracle_value(spec: MapSpec, limit: int = 200_000) -> float | None:
    try:
        return oracle.value_iterate(oracle.enumerate_states(spec, limit))[0]
    except oracle.StateLimitError:
        return None


def transfer_eval(snapshot: str | os.PathLike | SeedRun, task: RewardTask | str | os.PathLike,
                  budget: int | None = None, baseline_factor: int = 100,
                  eval_every: int = 200) -> TransferReport:
    """Few-shot transfer of a trained run to ``task`` next to a flat learner given ``baseline_factor`` times the frames."""
    run = snapshot if isinstance(snapshot, SeedRun) else load_checkpoint(snapshot)
    if not isinstance(task, RewardTask):
        task = load_task_file(task)
    budget = task.budget_frames if budget is None else budget
    if budget < 0:
        raise ConfigError("budget must be non-negative")
    spec = task.apply(run.spec)
    result = few_shot(GridQuest(spec, run.seed), run.model, run.worker, budget, GridQuest(spec, run.seed + 10_000))
    base_budget = baseline_factor * budget
    curve = baseline.train(GridQuest(spec, run.seed), base_budget, run.seed, eval_every)
    return TransferReport(task.name, run.seed, budget, result, base_budget, curve, oracle_value(spec))


def write_transfer_reports(reports: list[TransferReport], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "seed", "budget", "frames_used", "transfer_return", "planned_value", "complete_pass",
                    "baseline_budget", "baseline_best", "oracle_value", "ratio"])
        for r in reports:
            t = r.transfer
            w.writerow([r.task, r.seed, r.budget, t.frames_used, _fmt(t.achieved_return), _fmt(t.planned_value),
                        int(t.complete_pass), r.baseline_budget, _fmt(r.baseline_best), _fmt(r.oracle_value),
                        _fmt(r.ratio)])


def run_baseline(config: RunConfig, out_dir: str | os.PathLike) -> dict[int, list[tuple[int, float]]]:
    """Flat learner per seed with the run's frame budget; metrics use the shared schema."""
    spec = config.load_spec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = {}
    for seed in config.seeds:
        agent = baseline.FlatAgent(spec)
        rows = []

        def log(episode, frames, agent, ret, seed=seed, rows=rows):
            rows.append([seed, episode, frames, len(agent.visits), 0, 0, 0, _fmt(ret)])

        curves[seed] = baseline.train(GridQuest(spec, seed), config.frame_budget, seed,
                                      config.eval_every_episodes, agent=agent, log=log)
        with open(out / f"baseline_seed{seed}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            w.writerows(rows)
    return curves
