"""Critic-free, group-normalized policy optimization for a ReAct agent in a
small partially observable text household."""

from .env import Difficulty, ParsedAction, Split, TaskSpec, TaskType, Verb, generate_task, goal_check, reset, solve, step
from .estimator import IPOPlanner
from .harness import MetricsRow, RunConfig, evaluate, replay, train
from .ipo import DegenerateMode, IPOConfig, compute_advantages, compute_reward, ipo_objective, update_policy
from .policy import PolicyParams, grad_log_prob, kl_step, load_params, log_prob, sample_response, save_params
from .react import Trajectory, format_prompt, parse_action, parse_response
from .rollout import group_rollout, run_replica

__all__ = [
    "Difficulty", "ParsedAction", "Split", "TaskSpec", "TaskType", "Verb",
    "generate_task", "goal_check", "reset", "solve", "step",
    "IPOPlanner", "MetricsRow", "RunConfig", "evaluate", "replay", "train",
    "DegenerateMode", "IPOConfig", "compute_advantages", "compute_reward", "ipo_objective", "update_policy",
    "PolicyParams", "grad_log_prob", "kl_step", "load_params", "log_prob", "sample_response", "save_params",
    "Trajectory", "format_prompt", "parse_action", "parse_response",
    "group_rollout", "run_replica",
]
