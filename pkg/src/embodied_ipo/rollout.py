"""Group rollout: ``n`` replicas per task under a frozen policy snapshot."""

from __future__ import annotations

import hashlib
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .env import DEFAULT_MAX_STEPS, ParsedAction, TaskSpec, Verb, goal_check, reset, solve, step
from .policy import Belief, PolicyParams, sample_response
from .react import StepResponse, Trajectory


@dataclass
class TrajectoryGroup:
    spec: TaskSpec
    trajectories: list
    advantages: Optional[np.ndarray] = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trajectories], dtype=float)

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.mean())

    @property
    def std_reward(self) -> float:
        return float(self.rewards.std())

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass
class RolloutBatch:
    groups: list
    policy_version: str
    params_old: Optional[PolicyParams] = field(default=None, repr=False, compare=False)

    @property
    def trajectories(self) -> list:
        return [t for g in self.groups for t in g.trajectories]


def policy_version(params: PolicyParams) -> str:
    return hashlib.sha256(np.ascontiguousarray(params.weights).tobytes()).hexdigest()[:16]


def replica_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Independent stream for one replica, a child of ``master_seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(path)))


def run_replica(
    params_old: PolicyParams,
    spec: TaskSpec,
    max_steps: int = DEFAULT_MAX_STEPS,
    rng=None,
    greedy: bool = False,
    responder: Optional[Callable] = None,
) -> Trajectory:
    """Roll one episode: prompt, sample a response, parse it, step the world.

    ``responder(trajectory, belief)`` may replace the policy (scripted agents);
    it must return a :class:`StepResponse`.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    state, obs = reset(spec, max_steps)
    traj = Trajectory(spec, obs)
    belief = Belief.start(obs)
    done = False
    while not done:
        if responder is not None:
            response = responder(traj, belief)
        else:
            response = sample_response(params_old, traj, spec, rng, greedy=greedy, belief=belief)
        state, obs, done = step(state, response.parsed, spec)
        traj.append(response, obs)
        belief.update(response.parsed, obs, spec)
    traj.final_state = state
    reached = goal_check(state, spec)
    traj.reward = 1.0 if reached else 0.0
    traj.truncated = not reached and not state.terminated
    return traj


def scripted_response(action: Optional[ParsedAction], thought: str = "scripted") -> StepResponse:
    """A response carrying a fixed action and no policy choices."""
    text = action.to_text() if action is not None else ""
    return StepResponse(thought, text, action, (), 0.0, ())


def oracle_responder(spec: TaskSpec) -> Callable:
    """Follow the breadth-first plan for ``spec``, then declare done."""
    plan = solve(spec) or []

    def respond(trajectory, belief):
        t = len(trajectory)
        return scripted_response(plan[t] if t < len(plan) else ParsedAction(Verb.DONE), "follow the plan")

    return respond


def _replica_job(args):
    params_old, spec, max_steps, seed_path, greedy = args
    return run_replica(params_old, spec, max_steps, replica_rng(*seed_path), greedy=greedy)


def group_rollout(
    params_old: PolicyParams,
    batch: Sequence[TaskSpec],
    n: int,
    max_steps: int = DEFAULT_MAX_STEPS,
    rng=0,
    executor: Optional[Executor] = None,
    seed_path: tuple = (),
) -> RolloutBatch:
    """Run ``n`` replicas of every task in ``batch`` under the frozen ``params_old``.

    ``rng`` is the master seed; replica ``j`` of task ``i`` draws from the
    child stream ``(*seed_path, i, j)``, so results do not depend on whether or
    in which order replicas run on ``executor``.
    """
    if n < 2:
        raise ValueError("group rollout needs n >= 2")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    master = int(rng) if not isinstance(rng, np.random.Generator) else int(rng.integers(2**63))
    jobs = [
        (params_old, spec, max_steps, (master, *seed_path, i, j), False)
        for i, spec in enumerate(batch)
        for j in range(n)
    ]
    if executor is None:
        results = [_replica_job(job) for job in jobs]
    else:
        results = list(executor.map(_replica_job, jobs))
    groups = [TrajectoryGroup(spec, results[i * n:(i + 1) * n]) for i, spec in enumerate(batch)]
    return RolloutBatch(groups, policy_version(params_old), params_old)
