"""ReAct prompt rendering, response parsing and trajectory records."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

from .env import ARITY, Observation, ParsedAction, TaskSpec, Verb
from .exceptions import EmptyAction, GrammarError, MissingActionMarker, ReplayDivergence

THOUGHT_MARKER = "Thought:"
ACTION_MARKER = "Action:"

SYSTEM_PROMPT = """\
You are an intelligent agent in a household environment and your target is to perform actions to complete the task goal. At the beginning of your interactions, you will be given the detailed description of the current environment and your goal to accomplish.
For each of your turn, you will be given the observation of the last turn. You should first think about the current condition and plan for your future actions, and then output your action in this turn. Your output must strictly follow this format: Thought: <your thoughts> ; Action: <your next action>.

The available actions are:
1. go to (receptacle)
2. open (receptacle)
3. close (receptacle)
4. take (object)
5. put (object) in (receptacle)
6. heat (object)
7. cool (object)
8. clean (object)
9. examine (object)
10. inventory: check your current inventory
11. done: indicate that you believe the task is complete
Where (object) refers to manipulable objects and (receptacle) refers to receptacles or locations.

After your each turn, the environment will give you immediate feedback based on which you plan your next few steps. If the environment output: Nothing happens, that means the previous action is invalid and you should try more options.
You can only hold one object at a time. Before taking a new object, make sure you have placed down any object you are currently holding.
You should not assume or anticipate the feedback. Even if you have planned multiple steps ahead, you should only execute one action at a time.
Do not proceed with any further exploration or actions until you receive the feedback from the environment after your action."""

FORMAT_REMINDER = """\
Your response should use the following format:
Thought: <your thoughts>
Action: <your next action>"""

OBSERVATION_HEADER = "[Observation]"
RESPONSE_HEADER = "[Response]"


@dataclass(frozen=True)
class StepResponse:
    thought: str
    action_text: str
    parsed: Optional[ParsedAction]
    token_log_probs: tuple
    total_log_prob: float
    choices: tuple = ()
    # per-choice conditioning contexts cached at sampling time
    contexts: Optional[tuple] = field(default=None, compare=False, repr=False)

    @property
    def text(self) -> str:
        return f"{THOUGHT_MARKER} {self.thought}\n{ACTION_MARKER} {self.action_text}"


@dataclass(frozen=True)
class Turn:
    """One response together with the observation it produced."""

    response: StepResponse
    observation: Observation


@dataclass
class Trajectory:
    spec: TaskSpec
    initial_observation: Observation
    turns: list = field(default_factory=list)
    reward: float = 0.0
    truncated: bool = False
    final_state: object = field(default=None, compare=False, repr=False)

    @property
    def invalid_count(self) -> int:
        return sum(1 for t in self.turns if not t.observation.valid)

    @property
    def observations(self) -> list:
        return [self.initial_observation] + [t.observation for t in self.turns]

    def __len__(self) -> int:
        return len(self.turns)

    def prefix(self, t: int) -> "Trajectory":
        """The context ``tau_{<t}``: initial observation plus the first ``t`` turns."""
        return Trajectory(self.spec, self.initial_observation, list(self.turns[:t]))

    def append(self, response: StepResponse, observation: Observation) -> None:
        self.turns.append(Turn(response, observation))

    def to_record(self) -> dict:
        return {
            "task_id": self.spec.task_id,
            "seed": self.spec.seed,
            "split": self.spec.split.value,
            "task_type": self.spec.task_type.value,
            "difficulty": self.spec.difficulty.value,
            "initial_obs": self.initial_observation.text,
            "turns": [
                {
                    "obs": t.observation.text,
                    "thought": t.response.thought,
                    "action": t.response.action_text,
                    "valid": t.observation.valid,
                    "log_prob": t.response.total_log_prob,
                    "token_log_probs": list(t.response.token_log_probs),
                    "choices": list(t.response.choices),
                }
                for t in self.turns
            ],
            "reward": self.reward,
            "invalid_count": self.invalid_count,
            "truncated": self.truncated,
        }


def trajectory_from_record(record: dict) -> Trajectory:
    """Rebuild a trajectory from a JSON Lines record.

    The actions are re-executed from a fresh reset so every observation gets
    its structured view back; a logged observation that disagrees with
    re-execution raises :class:`ReplayDivergence`.
    """
    from .env import DEFAULT_MAX_STEPS, generate_task, reset, step

    max_steps = record.get("max_steps", DEFAULT_MAX_STEPS)
    spec, _ = generate_task(record["seed"], record["task_type"], record["difficulty"], max_steps)
    state, obs = reset(spec, max_steps)
    if obs.text != record["initial_obs"]:
        raise ReplayDivergence(0, record["initial_obs"], obs.text)
    traj = Trajectory(spec, obs)
    for t, turn in enumerate(record["turns"]):
        try:
            parsed = parse_action(turn["action"], spec)
        except GrammarError:
            parsed = None
        if state.terminated or state.step_count >= state.max_steps:
            raise ReplayDivergence(t + 1, turn["obs"], "<episode already over>")
        state, obs, _ = step(state, parsed, spec)
        if obs.text != turn["obs"] or obs.valid != turn["valid"]:
            raise ReplayDivergence(t + 1, turn["obs"], obs.text)
        response = StepResponse(
            thought=turn["thought"],
            action_text=turn["action"],
            parsed=parsed,
            token_log_probs=tuple(turn.get("token_log_probs", ())),
            total_log_prob=turn["log_prob"],
            choices=tuple(turn.get("choices", ())),
        )
        traj.append(response, obs)
    traj.final_state = state
    traj.reward = record["reward"]
    traj.truncated = record["truncated"]
    return traj


def write_jsonl(path, trajectories) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_record(), sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- prompt


def format_prompt(spec: TaskSpec, trajectory: Trajectory) -> str:
    parts = [SYSTEM_PROMPT, f"Your task is to: {spec.instruction}"]
    for obs in [trajectory.initial_observation]:
        parts.append(f"{OBSERVATION_HEADER}\n{obs.text}\n{FORMAT_REMINDER}")
    for turn in trajectory.turns:
        parts.append(f"{RESPONSE_HEADER}\n{turn.response.text}")
        parts.append(f"{OBSERVATION_HEADER}\n{turn.observation.text}\n{FORMAT_REMINDER}")
    return "\n\n".join(parts)


# ---------------------------------------------------------------- parsing


def parse_response(text: str):
    """Split a response into ``(thought, action_text)``; the last markers win."""
    a = text.rfind(ACTION_MARKER)
    if a < 0:
        raise MissingActionMarker("response has no 'Action:' marker")
    action_text = text[a + len(ACTION_MARKER):].lstrip().split("\n", 1)[0].strip()
    if not action_text:
        raise EmptyAction("'Action:' marker is not followed by an action")
    t = text.rfind(THOUGHT_MARKER, 0, a)
    thought = text[t + len(THOUGHT_MARKER):a].strip() if t >= 0 else ""
    return thought, action_text


_ENTITY = r"(.+?)"
_GRAMMAR = [
    (Verb.GOTO, re.compile(rf"^go to {_ENTITY}$")),
    (Verb.OPEN, re.compile(rf"^open {_ENTITY}$")),
    (Verb.CLOSE, re.compile(rf"^close {_ENTITY}$")),
    (Verb.TAKE, re.compile(rf"^take {_ENTITY}$")),
    (Verb.PUT, re.compile(rf"^put {_ENTITY} (?:in|on|in/on) {_ENTITY}$")),
    (Verb.HEAT, re.compile(rf"^heat {_ENTITY}$")),
    (Verb.COOL, re.compile(rf"^cool {_ENTITY}$")),
    (Verb.CLEAN, re.compile(rf"^clean {_ENTITY}$")),
    (Verb.EXAMINE, re.compile(rf"^examine {_ENTITY}$")),
    (Verb.INVENTORY, re.compile(r"^inventory$")),
    (Verb.DONE, re.compile(r"^done$")),
]


def parse_action(action_text: str, spec: TaskSpec) -> ParsedAction:
    norm = " ".join(action_text.lower().split())
    vocabulary = {e.lower(): e for e in spec.entities}
    for verb, pattern in _GRAMMAR:
        m = pattern.match(norm)
        if m is None:
            continue
        args = []
        for span in m.groups():
            if span not in vocabulary:
                raise GrammarError(f"unknown entity {span!r}", span=span)
            args.append(vocabulary[span])
        assert len(args) == ARITY[verb]
        return ParsedAction(verb, tuple(args))
    raise GrammarError(f"no action matches {action_text!r}", span=action_text)
