"""Training, evaluation and replay driver.

A run directory holds ``metrics.csv``, ``checkpoints/`` (policy text dumps plus
optimizer state) and ``logs/`` (trajectory JSON Lines).
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .env import (
    DEFAULT_MAX_STEPS,
    Difficulty,
    Split,
    TaskType,
    generate_task,
    split_of_seed,
)
from .exceptions import SignalStarvation
from .ipo import AdamState, DegenerateMode, IPOConfig, compute_advantages, ipo_objective, update_policy
from .policy import PolicyParams, load_params, save_params
from .react import format_prompt, read_jsonl, trajectory_from_record
from .rollout import group_rollout, oracle_responder, policy_version, replica_rng, run_replica

log = logging.getLogger(__name__)

STARVATION_LIMIT = 50
EVAL_EPISODES = 64

# stream ids under the master seed
_TASK_STREAM, _ROLLOUT_STREAM = 0, 1
_EVAL_TASKS, _EVAL_SAMPLING = 2, 3


def _parse_pool(text: str) -> tuple:
    """``"0:1000"`` is a half-open range; otherwise a comma list of seeds."""
    text = text.strip()
    if ":" in text:
        lo, hi = (int(v) for v in text.split(":"))
        return tuple(range(lo, hi))
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass
class EnvConfig:
    task_types: tuple = tuple(TaskType)
    difficulty: Difficulty = Difficulty.EASY
    seen_pool: tuple = tuple(s for s in range(1000) if split_of_seed(s) is Split.SEEN)
    unseen_pool: tuple = tuple(s for s in range(1000) if split_of_seed(s) is Split.UNSEEN)

    def __post_init__(self):
        self.task_types = tuple(TaskType(t) for t in self.task_types)
        self.difficulty = Difficulty(self.difficulty)
        self.seen_pool = tuple(s for s in self.seen_pool if split_of_seed(s) is Split.SEEN)
        self.unseen_pool = tuple(s for s in self.unseen_pool if split_of_seed(s) is Split.UNSEEN)
        if set(self.seen_pool) & set(self.unseen_pool):
            raise ValueError("seen and unseen seed pools overlap")
        if not self.seen_pool or not self.task_types:
            raise ValueError("training needs a non-empty seen pool and task type list")

    def pool(self, split: Split) -> tuple:
        return self.seen_pool if Split(split) is Split.SEEN else self.unseen_pool


@dataclass
class ScheduleConfig:
    total_updates: int = 200
    eval_every: int = 0
    master_seed: int = 0
    eval_episodes: int = EVAL_EPISODES


@dataclass
class LoggingConfig:
    output_dir: str = "runs/default"
    trajectory_log: bool = True
    metrics_path: str = "metrics.csv"
    checkpoint_every: int = 50


@dataclass
class RunConfig:
    ipo: IPOConfig = field(default_factory=IPOConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @property
    def output_dir(self) -> Path:
        return Path(self.logging.output_dir)

    @property
    def metrics_file(self) -> Path:
        p = Path(self.logging.metrics_path)
        return p if p.is_absolute() else self.output_dir / p

    @classmethod
    def from_ini(cls, path, overrides: Optional[dict] = None) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        return cls.from_mapping({s: dict(parser[s]) for s in parser.sections()}, overrides, base=Path(path).parent)

    @classmethod
    def from_mapping(cls, sections: dict, overrides: Optional[dict] = None, base: Optional[Path] = None) -> "RunConfig":
        sections = {k: dict(v) for k, v in sections.items()}
        for dotted, value in (overrides or {}).items():
            sec, key = dotted.split(".", 1)
            sections.setdefault(sec, {})[key] = str(value)
        unknown = set(sections) - {"ipo", "env", "schedule", "logging"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        ipo = _typed(IPOConfig, sections.get("ipo", {}))
        env_raw = dict(sections.get("env", {}))
        env_kwargs = {}
        if "task_types" in env_raw:
            env_kwargs["task_types"] = tuple(t.strip() for t in env_raw.pop("task_types").split(",") if t.strip())
        if "difficulty" in env_raw:
            env_kwargs["difficulty"] = env_raw.pop("difficulty").strip()
        for key in ("seen_pool", "unseen_pool"):
            if key in env_raw:
                env_kwargs[key] = _parse_pool(env_raw.pop(key))
        if env_raw:
            raise ValueError(f"unknown [env] keys: {sorted(env_raw)}")
        logging_cfg = _typed(LoggingConfig, sections.get("logging", {}))
        if base is not None and not Path(logging_cfg.output_dir).is_absolute():
            logging_cfg.output_dir = str(base / logging_cfg.output_dir)
        return cls(ipo, EnvConfig(**env_kwargs), _typed(ScheduleConfig, sections.get("schedule", {})), logging_cfg)

    def to_mapping(self) -> dict:
        env = self.env
        return {
            "ipo": {k: (v.value if isinstance(v, DegenerateMode) else v) for k, v in asdict(self.ipo).items()},
            "env": {
                "task_types": ",".join(t.value for t in env.task_types),
                "difficulty": env.difficulty.value,
                "seen_pool": ",".join(map(str, env.seen_pool)),
                "unseen_pool": ",".join(map(str, env.unseen_pool)),
            },
            "schedule": asdict(self.schedule),
            "logging": asdict(self.logging),
        }


def _typed(cls, raw: dict):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} for {cls.__name__}")
        default = known[key].default
        if isinstance(default, bool):
            kwargs[key] = value.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            kwargs[key] = int(value)
        elif isinstance(default, float):
            kwargs[key] = float(value)
        else:
            kwargs[key] = value.strip()
    return cls(**kwargs)


@dataclass
class MetricsRow:
    update_index: int
    mean_reward: float
    # sampled choices per trajectory, summed over turns
    mean_response_length: float
    mean_total_steps: float
    mean_invalid_steps: float
    clip_fraction: float
    kl_term: float
    eval_seen_rate: float = math.nan
    eval_unseen_rate: float = math.nan
    generalization_gap: float = math.nan
    # rendered response characters per trajectory
    mean_response_chars: float = 0.0
    objective_value: float = 0.0
    surrogate_term: float = 0.0
    learning_rate: float = 0.0

    @classmethod
    def header(cls) -> list:
        return [f.name for f in fields(cls)]

    def as_csv_row(self) -> list:
        out = []
        for name in self.header():
            v = getattr(self, name)
            if isinstance(v, float):
                out.append("" if math.isnan(v) else repr(v))
            else:
                out.append(str(v))
        return out


def read_metrics(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                MetricsRow(**{k: (int(v) if k == "update_index" else (float(v) if v != "" else math.nan)) for k, v in rec.items()})
            )
    return rows


@dataclass
class EvalResult:
    split: Split
    rate: float
    per_type: dict
    episodes: int
    trajectories: list = field(default_factory=list, repr=False)


@dataclass
class TrainResult:
    params: PolicyParams = field(repr=False)
    metrics: list = field(repr=False)
    checkpoint: Optional[Path] = None
    metrics_path: Optional[Path] = None
    log_path: Optional[Path] = None


def sample_training_tasks(config: RunConfig, update: int) -> list:
    rng = replica_rng(config.schedule.master_seed, _TASK_STREAM, update)
    env = config.env
    seeds = rng.choice(env.seen_pool, size=config.ipo.batch_tasks, replace=len(env.seen_pool) < config.ipo.batch_tasks)
    kinds = rng.integers(0, len(env.task_types), size=config.ipo.batch_tasks)
    return [
        generate_task(int(s), env.task_types[int(k)], env.difficulty, config.ipo.max_steps)[0]
        for s, k in zip(seeds, kinds)
    ]


def evaluation_tasks(
    split: Split,
    episodes: int = EVAL_EPISODES,
    difficulty: Difficulty = Difficulty.EASY,
    pool: Optional[Sequence[int]] = None,
    task_types: Sequence = tuple(TaskType),
    seed: int = 0,
) -> list:
    """``episodes`` tasks from ``split``'s pool, balanced over ``task_types``."""
    split = Split(split)
    if pool is None:
        pool = EnvConfig().pool(split)
    pool = [s for s in pool if split_of_seed(s) is split]
    rng = replica_rng(seed, _EVAL_TASKS, list(Split).index(split))
    seeds = rng.choice(pool, size=episodes, replace=len(pool) < episodes)
    types = [TaskType(t) for t in task_types]
    return [generate_task(int(s), types[i % len(types)], difficulty)[0] for i, s in enumerate(seeds)]


def evaluate(
    checkpoint,
    split=Split.SEEN,
    episodes: int = EVAL_EPISODES,
    greedy: bool = True,
    difficulty=Difficulty.EASY,
    seed: int = 0,
    pool: Optional[Sequence[int]] = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    responder_factory: Optional[Callable] = None,
    log_path=None,
) -> EvalResult:
    """Completion rate of a checkpoint (path or params) on one split.

    Each task runs once.  ``responder_factory(spec)`` swaps the policy for a
    scripted agent, as used by the oracle baseline.
    """
    params = checkpoint if isinstance(checkpoint, PolicyParams) or checkpoint is None else load_params(checkpoint)[0]
    split = Split(split)
    tasks = evaluation_tasks(split, episodes, Difficulty(difficulty), pool, seed=seed)
    trajs = []
    for i, spec in enumerate(tasks):
        responder = responder_factory(spec) if responder_factory else None
        rng = replica_rng(seed, _EVAL_SAMPLING, list(Split).index(split), i)
        trajs.append(run_replica(params, spec, max_steps, rng, greedy=greedy, responder=responder))
    per_type = {}
    for tt in TaskType:
        rs = [t.reward for t in trajs if t.spec.task_type is tt]
        if rs:
            per_type[tt.value] = float(np.mean(rs))
    if log_path is not None:
        _write_log(log_path, trajs, policy_version(params) if params is not None else "scripted", -1, max_steps)
    return EvalResult(split, float(np.mean([t.reward for t in trajs])), per_type, len(trajs), trajs)


def oracle_baseline(split=Split.SEEN, **kwargs) -> EvalResult:
    return evaluate(None, split, responder_factory=oracle_responder, **kwargs)


def uniform_baseline(split=Split.SEEN, **kwargs) -> EvalResult:
    return evaluate(PolicyParams.zeros(), split, **kwargs)


def _write_log(path, trajectories, version: str, update: int, max_steps: int) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for traj in trajectories:
            rec = traj.to_record()
            rec.update(policy_version=version, update=update, max_steps=max_steps)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_optimizer(path: Path, state: Optional[AdamState], step_index: int) -> None:
    if state is None:
        np.savez(path, step_index=step_index, t=0)
    else:
        np.savez(path, step_index=step_index, t=state.t, m=state.m, v=state.v)


def load_optimizer(path) -> Optional[AdamState]:
    with np.load(path) as data:
        if "m" not in data:
            return None
        return AdamState(data["m"].copy(), data["v"].copy(), int(data["t"]))


def train(
    config: RunConfig,
    write: bool = True,
    on_update: Optional[Callable] = None,
    stop_when: Optional[Callable] = None,
) -> TrainResult:
    """Run ``total_updates`` rollout/advantage/objective/update iterations.

    With ``write`` the run directory is populated; the result is a function
    of ``config`` alone.  ``stop_when(rows)`` may end the run early.
    """
    cfg, sched = config.ipo, config.schedule
    params = PolicyParams.zeros()
    reference = params
    adam = AdamState.like(params) if cfg.optimizer == "adam" else None
    out = config.output_dir
    metrics_path = config.metrics_file if write else None
    log_path = None
    ckpt_dir = out / "checkpoints"
    if write:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w", encoding="utf-8") as fh:
            json.dump(config.to_mapping(), fh, indent=2, sort_keys=True)
        with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(MetricsRow.header())
        if config.logging.trajectory_log:
            log_path = out / "logs" / "train.jsonl"
            log_path.write_text("")
        save_params(params, ckpt_dir / "policy_00000.txt", 0)
    rows = []
    starving = 0
    last_ckpt = None
    for u in range(sched.total_updates):
        tasks = sample_training_tasks(config, u)
        batch = group_rollout(params, tasks, cfg.group_size, cfg.max_steps, rng=sched.master_seed, seed_path=(_ROLLOUT_STREAM, u))
        for g in batch.groups:
            compute_advantages(g, DegenerateMode.ZERO_ADVANTAGE)
        report = ipo_objective(params, params, reference, batch, cfg)
        trajs = batch.trajectories
        lr = cfg.learning_rate_at(u, sched.total_updates)
        row = MetricsRow(
            update_index=u,
            mean_reward=float(np.mean([t.reward for t in trajs])),
            mean_response_length=float(np.mean([sum(len(x.response.choices) for x in t.turns) for t in trajs])),
            mean_total_steps=float(np.mean([len(t) for t in trajs])),
            mean_invalid_steps=float(np.mean([t.invalid_count for t in trajs])),
            clip_fraction=report.clip_fraction,
            kl_term=report.kl_term,
            mean_response_chars=float(np.mean([sum(len(x.response.text) for x in t.turns) for t in trajs])),
            objective_value=report.objective_value,
            surrogate_term=report.surrogate_term,
            learning_rate=lr,
        )
        if log_path is not None:
            _write_log(log_path, trajs, batch.policy_version, u, cfg.max_steps)
        params = update_policy(params, report, cfg, adam, learning_rate=lr)
        if sched.eval_every and (u + 1) % sched.eval_every == 0:
            kw = dict(episodes=sched.eval_episodes, difficulty=config.env.difficulty, seed=sched.master_seed, max_steps=cfg.max_steps)
            row.eval_seen_rate = evaluate(params, Split.SEEN, pool=config.env.seen_pool, **kw).rate
            row.eval_unseen_rate = evaluate(params, Split.UNSEEN, pool=config.env.unseen_pool, **kw).rate
            row.generalization_gap = row.eval_unseen_rate - row.eval_seen_rate
        rows.append(row)
        if write:
            with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(row.as_csv_row())
            every = config.logging.checkpoint_every
            if (every and (u + 1) % every == 0) or u + 1 == sched.total_updates:
                last_ckpt = ckpt_dir / f"policy_{u + 1:05d}.txt"
                save_params(params, last_ckpt, u + 1)
                _write_optimizer(ckpt_dir / f"optimizer_{u + 1:05d}.npz", adam, u + 1)
        log.info(
            "update %d reward %.3f invalid %.2f steps %.2f kl %.4f",
            u, row.mean_reward, row.mean_invalid_steps, row.mean_total_steps, row.kl_term,
        )
        if on_update is not None:
            on_update(row)
        starving = starving + 1 if row.mean_reward == 0.0 else 0
        if starving >= STARVATION_LIMIT:
            raise SignalStarvation(
                f"{STARVATION_LIMIT} consecutive updates without a successful trajectory (last update {u}); "
                "an easier difficulty or larger group size restores the learning signal"
            )
        if stop_when is not None and stop_when(rows):
            if write and (last_ckpt is None or last_ckpt.name != f"policy_{u + 1:05d}.txt"):
                last_ckpt = ckpt_dir / f"policy_{u + 1:05d}.txt"
                save_params(params, last_ckpt, u + 1)
                _write_optimizer(ckpt_dir / f"optimizer_{u + 1:05d}.npz", adam, u + 1)
            break
    return TrainResult(params, rows, last_ckpt, metrics_path, log_path)


def first_reaching(rows: Sequence[MetricsRow], threshold: float, window: int = 1) -> Optional[int]:
    """First update whose trailing ``window``-mean reward is at least ``threshold``."""
    rewards = [r.mean_reward for r in rows]
    for i in range(len(rewards)):
        lo = max(0, i - window + 1)
        if i + 1 >= window and np.mean(rewards[lo:i + 1]) >= threshold:
            return rows[i].update_index
    return None


def replay(log_path, index: int) -> str:
    """Re-execute logged trajectory ``index`` and return its transcript.

    Raises :class:`ReplayDivergence` at the first observation that differs.
    """
    records = read_jsonl(log_path)
    if not 0 <= index < len(records):
        raise IndexError(f"log has {len(records)} records, no index {index}")
    return replay_record(records[index])


def replay_record(record: dict) -> str:
    traj = trajectory_from_record(record)
    return format_prompt(traj.spec, traj) + f"\n\n[Reward] {record['reward']}"
