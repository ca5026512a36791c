"""Interactive Policy Optimization: completion reward, group advantages,
per-step probability ratios and the clipped, KL-regularized objective."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import goal_check, reset, step
from .exceptions import DegenerateGroup, NonFiniteGradient, StaleBatch
from .policy import (
    PolicyParams,
    grad_kl_step,
    grad_log_prob,
    kl_step,
    log_prob,
)
from .react import Trajectory
from .rollout import RolloutBatch, TrajectoryGroup


class DegenerateMode(str, enum.Enum):
    ZERO_ADVANTAGE = "ZeroAdvantage"
    SKIP_GROUP = "SkipGroup"


@dataclass
class IPOConfig:
    epsilon: float = 0.2
    beta: float = 0.01
    learning_rate: float = 0.05
    group_size: int = 5
    batch_tasks: int = 16
    max_steps: int = 30
    # carried for completeness; no formula discounts rewards
    gamma: float = 1.0
    degenerate_group_mode: DegenerateMode = DegenerateMode.ZERO_ADVANTAGE
    optimizer: str = "sgd"
    # "constant" or "linear" (decays to zero over the run)
    lr_schedule: str = "constant"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.degenerate_group_mode = DegenerateMode(self.degenerate_group_mode)
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def learning_rate_at(self, update: int, total: int) -> float:
        if self.lr_schedule == "linear":
            return self.learning_rate * (1.0 - update / max(total, 1))
        return self.learning_rate


@dataclass
class ObjectiveReport:
    objective_value: float
    surrogate_term: float
    kl_term: float
    clip_fraction: float
    gradient: np.ndarray = field(repr=False)
    n_steps: int = 0
    skipped_groups: int = 0


def compute_reward(trajectory: Trajectory, spec=None) -> float:
    """1.0 iff the goal predicate holds on the final world state, else 0.0.

    The final state is recovered by re-executing the parsed actions, so the
    value depends on nothing but the world the actions produced.
    """
    spec = spec or trajectory.spec
    state, _ = reset(spec, max(len(trajectory.turns), 1))
    for turn in trajectory.turns:
        if state.terminated:
            break
        state, _, _ = step(state, turn.response.parsed, spec)
    return 1.0 if goal_check(state, spec) else 0.0


def compute_advantages(group: TrajectoryGroup, mode=DegenerateMode.ZERO_ADVANTAGE) -> np.ndarray:
    """``(r_i - mean) / std`` with the population standard deviation of the group.

    For a group whose rewards are all equal, ``ZeroAdvantage`` returns zeros;
    ``SkipGroup`` also returns zeros but emits a :class:`DegenerateGroup` warning
    so callers can drop the group.
    """
    mode = DegenerateMode(mode)
    r = group.rewards
    if len(r) < 2:
        raise ValueError("advantages need a group of at least two trajectories")
    # scaling by n cancels in the ratio and keeps integer rewards exact
    d = len(r) * r - r.sum()
    sigma = math.sqrt(float(np.mean(d * d)))
    if sigma == 0.0:
        if mode is DegenerateMode.SKIP_GROUP:
            warnings.warn(DegenerateGroup(f"group {group.spec.task_id} has zero reward variance"))
        adv = np.zeros_like(r)
    else:
        adv = d / sigma
    group.advantages = adv
    return adv


def probability_ratio(params: PolicyParams, params_old: PolicyParams, trajectory: Trajectory, t: int) -> float:
    if not 0 <= t < len(trajectory.turns):
        raise IndexError(f"step {t} outside trajectory of length {len(trajectory.turns)}")
    prefix = trajectory.prefix(t)
    response = trajectory.turns[t].response
    return math.exp(log_prob(params, prefix, response) - log_prob(params_old, prefix, response))


def _degenerate(group: TrajectoryGroup) -> bool:
    return group.std_reward == 0.0


def ipo_objective(
    params: PolicyParams,
    params_old: PolicyParams,
    params_ref: PolicyParams,
    batch: RolloutBatch,
    config: IPOConfig,
    check_stale: bool = True,
    stale_tol: float = 1e-9,
) -> ObjectiveReport:
    """Value and exact gradient of the clipped, KL-penalized objective on ``batch``.

    Each group contributes ``(1/n) sum_i (1/|tau_i|) sum_t [min(Pr A, clip(Pr) A) - beta KL_t]``
    and groups are averaged.  Where the clipped branch is the active minimum the
    step contributes no surrogate gradient.
    """
    eps, beta = config.epsilon, config.beta
    grad = np.zeros_like(params.weights)
    surrogate = 0.0
    kl_total = 0.0
    clipped = 0
    n_steps = 0
    used_groups = 0
    skipped = 0
    for group in batch.groups:
        if config.degenerate_group_mode is DegenerateMode.SKIP_GROUP and _degenerate(group):
            skipped += 1
            continue
        adv = group.advantages
        if adv is None:
            adv = compute_advantages(group, DegenerateMode.ZERO_ADVANTAGE)
        used_groups += 1
        n = len(group.trajectories)
        for i, traj in enumerate(group.trajectories):
            T = len(traj.turns)
            if T == 0:
                continue
            a = float(adv[i])
            weight = 1.0 / (n * T)
            for t, turn in enumerate(traj.turns):
                response = turn.response
                ctx_traj = traj.prefix(t)
                lp_old = response.total_log_prob
                if check_stale:
                    rescored = log_prob(params_old, ctx_traj, response)
                    if abs(rescored - lp_old) > stale_tol:
                        raise StaleBatch(
                            f"{traj.spec.task_id} step {t}: recorded log-prob {lp_old} "
                            f"re-scores to {rescored} under params_old"
                        )
                lp_new = log_prob(params, ctx_traj, response)
                ratio = math.exp(lp_new - lp_old)
                clipped_ratio = min(max(ratio, 1.0 - eps), 1.0 + eps)
                unclipped_val = ratio * a
                clipped_val = clipped_ratio * a
                n_steps += 1
                if clipped_val < unclipped_val:
                    surrogate += weight * clipped_val
                    clipped += 1
                else:
                    surrogate += weight * unclipped_val
                    if a != 0.0:
                        grad += (weight * a * ratio) * grad_log_prob(params, ctx_traj, response)
                if beta > 0.0:
                    kl = kl_step(params, params_ref, ctx_traj, response)
                    kl_total += weight * kl
                    if kl > 0.0:
                        grad -= (weight * beta) * grad_kl_step(params, params_ref, ctx_traj, response)
    scale = 1.0 / used_groups if used_groups else 0.0
    surrogate *= scale
    kl_total *= scale
    grad *= scale
    return ObjectiveReport(
        objective_value=surrogate - beta * kl_total,
        surrogate_term=surrogate,
        kl_term=kl_total,
        clip_fraction=clipped / n_steps if n_steps else 0.0,
        gradient=grad,
        n_steps=n_steps,
        skipped_groups=skipped,
    )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, params: PolicyParams) -> "AdamState":
        return cls(np.zeros_like(params.weights), np.zeros_like(params.weights))


def update_policy(
    params: PolicyParams,
    report: ObjectiveReport,
    config: IPOConfig,
    state: Optional[AdamState] = None,
    learning_rate: Optional[float] = None,
) -> PolicyParams:
    """One ascent step on the objective; ``params`` is left untouched.

    ``optimizer="adam"`` needs ``state``, which is advanced in place.
    ``learning_rate`` overrides the configured rate (used by schedules).
    """
    lr = config.learning_rate if learning_rate is None else learning_rate
    g = report.gradient
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("objective gradient contains NaN or Inf")
    if config.optimizer == "sgd":
        new = params.weights + lr * g
    else:
        if state is None:
            raise ValueError("adam optimizer requires an AdamState")
        state.t += 1
        state.m = config.adam_beta1 * state.m + (1 - config.adam_beta1) * g
        state.v = config.adam_beta2 * state.v + (1 - config.adam_beta2) * g * g
        m_hat = state.m / (1 - config.adam_beta1 ** state.t)
        v_hat = state.v / (1 - config.adam_beta2 ** state.t)
        new = params.weights + lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    if not np.all(np.isfinite(new)):
        raise NonFiniteGradient("update produced non-finite weights")
    return PolicyParams(new)
