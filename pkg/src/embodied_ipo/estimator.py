"""scikit-learn compatible wrapper around the training loop.

``X`` is a collection of tasks: either :class:`TaskSpec` objects or rows of
``(seed, task_type)``.  ``fit`` trains on the layouts in ``X``; ``predict``
returns 1/0 completion per task; ``score`` is the completion rate.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .env import Difficulty, Split, TaskSpec, TaskType, generate_task, split_of_seed
from .harness import EnvConfig, LoggingConfig, RunConfig, ScheduleConfig, train
from .ipo import IPOConfig
from .policy import PolicyParams
from .rollout import replica_rng, run_replica


def check_tasks(X, difficulty=Difficulty.EASY, max_steps: int = 30) -> list:
    """Coerce ``X`` to a non-empty list of :class:`TaskSpec`."""
    if isinstance(X, TaskSpec):
        X = [X]
    if X is None or len(X) == 0:
        raise ValueError("X must contain at least one task")
    out = []
    for row in X:
        if isinstance(row, TaskSpec):
            out.append(row)
            continue
        row = list(np.atleast_1d(np.asarray(row, dtype=object)))
        if len(row) != 2:
            raise ValueError(f"task rows are (seed, task_type); got {row!r}")
        seed, kind = row
        if not float(seed).is_integer() or int(seed) < 0:
            raise ValueError(f"task seed must be a non-negative integer, got {seed!r}")
        kind = list(TaskType)[int(kind)] if isinstance(kind, (int, np.integer)) else kind
        out.append(generate_task(int(seed), kind, difficulty, max_steps)[0])
    return out


def check_policy(params) -> PolicyParams:
    if not isinstance(params, PolicyParams):
        params = PolicyParams(np.asarray(params, dtype=float))
    if not np.all(np.isfinite(params.weights)):
        raise ValueError("policy weights must be finite")
    return params


class IPOPlanner(BaseEstimator):
    def __init__(
        self,
        difficulty: str = "Easy",
        total_updates: int = 200,
        batch_tasks: int = 16,
        group_size: int = 5,
        max_steps: int = 30,
        epsilon: float = 0.2,
        beta: float = 0.001,
        learning_rate: float = 0.05,
        optimizer: str = "adam",
        lr_schedule: str = "linear",
        greedy: bool = True,
        random_state: Optional[int] = 0,
    ):
        self.difficulty = difficulty
        self.total_updates = total_updates
        self.batch_tasks = batch_tasks
        self.group_size = group_size
        self.max_steps = max_steps
        self.epsilon = epsilon
        self.beta = beta
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.lr_schedule = lr_schedule
        self.greedy = greedy
        self.random_state = random_state

    def _run_config(self, X) -> RunConfig:
        specs = check_tasks(X, self.difficulty, self.max_steps)
        seeds = sorted({s.seed for s in specs if split_of_seed(s.seed) is Split.SEEN})
        if not seeds:
            raise ValueError("fit needs at least one task from the seen layout pool")
        types = sorted({s.task_type for s in specs}, key=list(TaskType).index)
        ipo = IPOConfig(
            epsilon=self.epsilon,
            beta=self.beta,
            learning_rate=self.learning_rate,
            group_size=self.group_size,
            batch_tasks=self.batch_tasks,
            max_steps=self.max_steps,
            optimizer=self.optimizer,
            lr_schedule=self.lr_schedule,
        )
        env = EnvConfig(task_types=tuple(types), difficulty=self.difficulty, seen_pool=tuple(seeds), unseen_pool=())
        schedule = ScheduleConfig(total_updates=self.total_updates, master_seed=int(self.random_state or 0))
        return RunConfig(ipo, env, schedule, LoggingConfig(trajectory_log=False))

    def fit(self, X, y=None):
        result = train(self._run_config(X), write=False)
        self.params_ = result.params
        self.history_ = result.metrics
        self.n_features_in_ = self.params_.feature_dim
        return self

    def rollout(self, X) -> list:
        check_is_fitted(self, "params_")
        specs = check_tasks(X, self.difficulty, self.max_steps)
        seed = int(self.random_state or 0)
        return [
            run_replica(self.params_, spec, self.max_steps, replica_rng(seed, 7, i), greedy=self.greedy)
            for i, spec in enumerate(specs)
        ]

    def predict(self, X) -> np.ndarray:
        return np.array([t.reward for t in self.rollout(X)])

    def score(self, X, y=None) -> float:
        return float(self.predict(X).mean())
