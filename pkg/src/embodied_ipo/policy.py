"""Factored log-linear policy over ReAct responses.

A response is produced by a short sequence of categorical choices: a thought
template, a verb, then one reference per verb argument.  Each choice is a
softmax over a subset of columns of one weight matrix, evaluated at a feature
vector built from the observed history plus the choices already made in this
step.  Because every choice is an explicit categorical, log-probabilities,
their gradients and KL divergences are exact.

Arguments are chosen as *references* (the goal object, the target receptacle,
the place to search next, ...) that are resolved against what the agent has
observed so far and then rendered as entity names.  References that cannot be
resolved are masked out; if none remain the argument is left empty and the
environment answers with its invalid-action sentinel.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import (
    ARITY,
    ASSISTS,
    GOAL_KINDS,
    ROOMS,
    SEEN_DISTRACTORS,
    STORAGE_KINDS,
    APPLIANCES,
    Assist,
    Difficulty,
    Observation,
    ParsedAction,
    TaskSpec,
    TaskType,
    Verb,
    VERBS,
    kind_of,
)
from .exceptions import ChoiceOutOfVocabulary, GrammarError
from .react import StepResponse, Trajectory, parse_action, parse_response

THOUGHTS = (
    "I need to find a {kind} first.",
    "The {kind} may be inside a closed container, so I should open it.",
    "I see a {kind} here, I should take it.",
    "I am holding the {kind}, now I should go to {target}.",
    "I should put the {kind} in {target}.",
    "I need to use the {appliance} on the {kind}.",
    "I should go to the {appliance}.",
    "I am holding something I do not need, I should put it down.",
    "Let me check my inventory.",
    "I should look around this place more carefully.",
    "I think the task is complete.",
    "I should explore another location.",
    "I should go to another room.",
    "The previous action did nothing, I should try something else.",
    "Let me plan the remaining steps for the {kind}.",
    "I should keep going with my plan.",
)

REFS = ("goal", "other", "seek", "target", "appliance", "here", "none")
OBJECT_REFS = ("goal", "other")
PLACE_REFS = ("seek", "target", "appliance")

N_THOUGHTS = len(THOUGHTS)
N_VERBS = len(VERBS)
THOUGHT_IDS = tuple(range(N_THOUGHTS))
VERB_IDS = tuple(range(N_THOUGHTS, N_THOUGHTS + N_VERBS))
REF_BASE = N_THOUGHTS + N_VERBS
REF_ID = {r: REF_BASE + i for i, r in enumerate(REFS)}
CHOICE_VOCAB = REF_BASE + len(REFS)
VERB_INDEX = {v: i for i, v in enumerate(VERBS)}


def choice_name(cid: int) -> str:
    if cid < N_THOUGHTS:
        return f"thought:{cid}"
    if cid < REF_BASE:
        return f"verb:{VERBS[cid - N_THOUGHTS].value}"
    return f"ref:{REFS[cid - REF_BASE]}"


# ---------------------------------------------------------------- belief


@dataclass
class Belief:
    """What the agent can infer from its own history of actions and observations."""

    location: str
    rec_room: dict
    known_place: dict
    visible: Optional[tuple] = None
    closed: Optional[bool] = None
    holding: Optional[str] = None
    transformed: set = field(default_factory=set)
    placed: set = field(default_factory=set)
    visited: set = field(default_factory=set)
    last_verb: Optional[Verb] = None
    last_valid: bool = True
    steps: int = 0
    last_text: str = ""

    @classmethod
    def start(cls, obs: Observation) -> "Belief":
        b = cls(
            location=obs.location,
            rec_room={r: room for r, room in obs.listed},
            known_place={o: p for o, p in obs.hints},
            last_text=obs.text,
        )
        b.visited.add(obs.location)
        return b

    def room(self) -> Optional[str]:
        return self.rec_room.get(self.location, self.location if self.location in ROOMS else None)

    def _see(self, obs: Observation) -> None:
        self.visible = obs.visible
        self.closed = obs.closed
        if obs.visible is not None:
            for o, p in list(self.known_place.items()):
                if p == self.location and o not in obs.visible:
                    del self.known_place[o]
            for o in obs.visible:
                self.known_place[o] = self.location
        for r, room in obs.listed:
            self.rec_room[r] = room

    def update(self, action: Optional[ParsedAction], obs: Observation, spec: TaskSpec) -> None:
        self.steps += 1
        self.last_text = obs.text
        self.last_verb = action.verb if action is not None else None
        self.last_valid = obs.valid
        if not obs.valid or action is None:
            return
        verb, args = action.verb, action.args
        if verb is Verb.GOTO:
            self.location = args[0]
            self.visited.add(args[0])
            self.visible = None
            self.closed = None
            self._see(obs)
        elif verb is Verb.OPEN:
            self._see(obs)
        elif verb is Verb.CLOSE:
            self.closed = True
            self.visible = ()
        elif verb is Verb.TAKE:
            self.holding = args[0]
            self.known_place.pop(args[0], None)
            if self.visible is not None:
                self.visible = tuple(o for o in self.visible if o != args[0])
        elif verb is Verb.PUT:
            obj, rec = args
            self.holding = None
            self.known_place[obj] = rec
            self.visible = tuple(sorted((self.visible or ()) + (obj,)))
            if rec == spec.target and kind_of(obj) == spec.goal_kind:
                self.placed.add(obj)
        elif verb in (Verb.HEAT, Verb.COOL, Verb.CLEAN):
            self.transformed.add(args[0])
        elif verb is Verb.EXAMINE:
            if obs.visible is not None:
                self._see(obs)
            elif "under the desklamp" in obs.text:
                self.transformed.add(args[0])


def belief_of(trajectory: Trajectory) -> Belief:
    b = Belief.start(trajectory.initial_observation)
    for turn in trajectory.turns:
        b.update(turn.response.parsed, turn.observation, trajectory.spec)
    return b


# ---------------------------------------------------------------- references


def _is_goal(obj: str, spec: TaskSpec) -> bool:
    return kind_of(obj) == spec.goal_kind


def _hop(dest: Optional[str], b: Belief, spec: TaskSpec) -> Optional[str]:
    """Next location on the way to ``dest`` given the mode's movement rules."""
    if dest is None or dest == b.location:
        return None
    if Assist.TELEPORT in ASSISTS[spec.difficulty]:
        return dest
    dest_room = b.rec_room.get(dest, dest if dest in ROOMS else None)
    here_room = b.room()
    if dest_room is None:
        return None
    if dest_room == here_room or dest in ROOMS:
        return dest
    return dest_room


def resolve(ref: str, verb: Verb, b: Belief, spec: TaskSpec) -> Optional[str]:
    at_target = b.location == spec.target
    if ref == "goal":
        if b.holding is not None:
            if _is_goal(b.holding, spec) and verb is not Verb.TAKE:
                return b.holding
            if verb is Verb.PUT:
                return None
        if verb is Verb.PUT or b.closed or at_target:
            return None
        for o in b.visible or ():
            if _is_goal(o, spec):
                return o
        return None
    if ref == "other":
        if b.holding is not None:
            if not _is_goal(b.holding, spec) and verb is not Verb.TAKE:
                return b.holding
            if verb is Verb.PUT:
                return None
        if verb is Verb.PUT or b.closed:
            return None
        for o in b.visible or ():
            if not _is_goal(o, spec):
                return o
        return None
    if ref == "here":
        return b.location if b.location in b.rec_room else None
    if ref == "target":
        return _hop(spec.target, b, spec)
    if ref == "appliance":
        return _hop(spec.appliance, b, spec)
    if ref == "seek":
        pending = sorted(
            p for o, p in b.known_place.items()
            if _is_goal(o, spec) and p != spec.target and p != b.location
        )
        if pending:
            return _hop(pending[0], b, spec)
        here_room = b.room()
        unvisited = sorted(r for r in b.rec_room if r not in b.visited)
        same_room = [r for r in unvisited if b.rec_room[r] == here_room]
        if same_room or unvisited:
            return _hop((same_room or unvisited)[0], b, spec)
        return None
    return None


def slot_refs(verb: Verb, position: int) -> tuple:
    if verb is Verb.GOTO:
        return PLACE_REFS
    if verb in (Verb.OPEN, Verb.CLOSE):
        return ("here",)
    if verb is Verb.PUT and position == 1:
        return ("here",)
    return OBJECT_REFS


def candidates_for(verb: Verb, position: int, b: Belief, spec: TaskSpec):
    """``[(ref, entity)]`` for the references that resolve in this slot."""
    out = []
    for ref in slot_refs(verb, position):
        ent = resolve(ref, verb, b, spec)
        if ent is not None:
            out.append((ref, ent))
    return out or [("none", "")]


# ---------------------------------------------------------------- features

PHASES = (
    "hold_other", "to_appliance", "transform", "to_target", "closed_target",
    "put", "take", "closed", "seek",
)
TASK_TYPES = tuple(TaskType)
ENTITY_TOKENS = tuple(
    sorted(set(GOAL_KINDS) | set(SEEN_DISTRACTORS) | set(STORAGE_KINDS) | set(APPLIANCES) | set(ROOMS))
)
STEP_BUCKETS = (0, 1, 5, 10, 20)
_WORD = re.compile(r"[a-z]+")


class FeatureLayout:
    """Index ranges of the frozen, hand-designed feature map."""

    def __init__(self):
        self.slices = {}
        self.dim = 0
        for name, size in [
            ("bias", 1),
            ("task", len(TASK_TYPES)),
            ("difficulty", len(Difficulty)),
            ("phase", len(PHASES)),
            ("phase_task", len(PHASES) * len(TASK_TYPES)),
            ("holding", 3),
            ("goal_visible", 1),
            ("other_visible", 1),
            ("where", 4),
            ("transformed", 1),
            ("placed", 3),
            ("last_verb", N_VERBS + 1),
            ("last_valid", 1),
            ("visited", 2),
            ("step_bucket", len(STEP_BUCKETS)),
            ("tokens", len(ENTITY_TOKENS)),
            ("stage", 3),
            ("thought", N_THOUGHTS),
            ("verb_slot", N_VERBS * 2),
        ]:
            self.slices[name] = (self.dim, size)
            self.dim += size
        self.base_dim = self.slices["stage"][0]

    def index(self, name: str, offset: int = 0) -> int:
        start, size = self.slices[name]
        if not 0 <= offset < size:
            raise IndexError(f"{name}[{offset}] outside size {size}")
        return start + offset


LAYOUT = FeatureLayout()
FEATURE_DIM = LAYOUT.dim
_TOKEN_INDEX = {t: i for i, t in enumerate(ENTITY_TOKENS)}


def phase_of(b: Belief, spec: TaskSpec) -> str:
    held = b.holding
    at_target = b.location == spec.target
    at_app = b.location == spec.appliance
    remote = Assist.REMOTE_APPLIANCE in ASSISTS[spec.difficulty]
    if held is not None and not _is_goal(held, spec):
        return "hold_other"
    if held is not None:
        needs = spec.appliance is not None and held not in b.transformed
        if needs:
            return "transform" if (at_app or remote) else "to_appliance"
        if at_target:
            return "closed_target" if b.closed else "put"
        return "to_target"
    if resolve("goal", Verb.TAKE, b, spec) is not None:
        return "take"
    if b.closed:
        return "closed"
    return "seek"


def _base_indices(b: Belief, spec: TaskSpec) -> list:
    L = LAYOUT
    idx = [L.index("bias")]
    t = TASK_TYPES.index(spec.task_type)
    idx.append(L.index("task", t))
    idx.append(L.index("difficulty", list(Difficulty).index(spec.difficulty)))
    p = PHASES.index(phase_of(b, spec))
    idx.append(L.index("phase", p))
    idx.append(L.index("phase_task", p * len(TASK_TYPES) + t))
    if b.holding is None:
        idx.append(L.index("holding", 0))
    else:
        idx.append(L.index("holding", 1 if _is_goal(b.holding, spec) else 2))
    vis = b.visible or ()
    if any(_is_goal(o, spec) for o in vis):
        idx.append(L.index("goal_visible"))
    if any(not _is_goal(o, spec) for o in vis):
        idx.append(L.index("other_visible"))
    if b.location == spec.target:
        idx.append(L.index("where", 0))
    if b.location == spec.appliance:
        idx.append(L.index("where", 1))
    if b.closed:
        idx.append(L.index("where", 2))
    if b.location not in b.rec_room:
        idx.append(L.index("where", 3))
    if b.holding is not None and b.holding in b.transformed:
        idx.append(L.index("transformed"))
    idx.append(L.index("placed", min(len(b.placed), 2)))
    lv = N_VERBS if b.last_verb is None else VERB_INDEX[b.last_verb]
    idx.append(L.index("last_verb", lv))
    if b.last_valid:
        idx.append(L.index("last_valid"))
    if spec.target in b.visited:
        idx.append(L.index("visited", 0))
    if spec.appliance in b.visited:
        idx.append(L.index("visited", 1))
    bucket = max(i for i, lo in enumerate(STEP_BUCKETS) if b.steps >= lo)
    idx.append(L.index("step_bucket", bucket))
    tokens = {_TOKEN_INDEX[w] for w in _WORD.findall(b.last_text.lower()) if w in _TOKEN_INDEX}
    idx.extend(L.index("tokens", i) for i in sorted(tokens))
    return idx


def _dense(indices) -> np.ndarray:
    x = np.zeros(FEATURE_DIM)
    x[indices] = 1.0
    return x


def featurize(trajectory: Trajectory, spec: Optional[TaskSpec] = None) -> np.ndarray:
    """History features of ``trajectory`` (observations and own actions only)."""
    spec = spec or trajectory.spec
    return _dense(_base_indices(belief_of(trajectory), spec))


def _stage_indices(stage: int, thought: Optional[int] = None, verb: Optional[Verb] = None, position: int = 0):
    idx = [LAYOUT.index("stage", stage)]
    if stage == 1:
        idx.append(LAYOUT.index("thought", thought))
    if stage == 2:
        idx.append(LAYOUT.index("verb_slot", VERB_INDEX[verb] * 2 + position))
    return idx


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class PolicyParams:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError("weights must be a matrix")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, feature_dim: int = FEATURE_DIM, choice_vocab: int = CHOICE_VOCAB) -> "PolicyParams":
        return cls(np.zeros((feature_dim, choice_vocab)))

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def choice_vocab(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other):
        return isinstance(other, PolicyParams) and np.array_equal(self.weights, other.weights)

    __hash__ = None


@dataclass(frozen=True)
class ChoiceDistribution:
    logits: np.ndarray
    probabilities: np.ndarray
    candidate_ids: tuple

    @classmethod
    def from_logits(cls, logits, candidate_ids) -> "ChoiceDistribution":
        z = np.asarray(logits, dtype=float)
        e = np.exp(z - z.max())
        return cls(z, e / e.sum(), tuple(candidate_ids))

    def log_probabilities(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        return z - np.log(np.exp(z).sum())


@dataclass(frozen=True)
class ChoiceContext:
    """Everything needed to re-score one recorded choice."""

    features: tuple  # active feature indices (binary features)
    candidate_ids: tuple
    chosen: int

    def dense(self) -> np.ndarray:
        return _dense(list(self.features))

    def distribution(self, params: PolicyParams) -> ChoiceDistribution:
        if self.chosen not in self.candidate_ids:
            raise ChoiceOutOfVocabulary(f"choice {self.chosen} not among candidates {self.candidate_ids}")
        if max(self.candidate_ids) >= params.choice_vocab:
            raise ChoiceOutOfVocabulary(f"candidate ids exceed vocabulary of size {params.choice_vocab}")
        w = params.weights
        logits = w[list(self.features)][:, list(self.candidate_ids)].sum(axis=0)
        return ChoiceDistribution.from_logits(logits, self.candidate_ids)


def _render_thought(tid: int, spec: TaskSpec) -> str:
    return THOUGHTS[tid].format(
        kind=spec.goal_kind,
        target=spec.target or "the right place",
        appliance=spec.appliance or "right appliance",
    )


def _render_action(verb: Verb, args) -> str:
    if any(a == "" for a in args):
        # unresolved reference: the surface form is missing its argument
        return {Verb.GOTO: "go to", Verb.PUT: "put"}.get(verb, verb.value.lower())
    return ParsedAction(verb, tuple(args)).to_text()


def _contexts_for(b: Belief, spec: TaskSpec, choices) -> tuple:
    """Rebuild the per-choice contexts of a step from its recorded choice ids."""
    base = _base_indices(b, spec)
    contexts = []
    it = iter(choices)
    try:
        tid = next(it)
        vid = next(it)
    except StopIteration:
        raise ChoiceOutOfVocabulary("recorded step is missing its thought or verb choice") from None
    if tid not in THOUGHT_IDS or vid not in VERB_IDS:
        raise ChoiceOutOfVocabulary(f"invalid thought/verb ids {tid}, {vid}")
    contexts.append(ChoiceContext(tuple(base + _stage_indices(0)), THOUGHT_IDS, tid))
    contexts.append(ChoiceContext(tuple(base + _stage_indices(1, thought=tid)), VERB_IDS, vid))
    verb = VERBS[vid - N_THOUGHTS]
    for pos in range(ARITY[verb]):
        cands = candidates_for(verb, pos, b, spec)
        ids = tuple(REF_ID[r] for r, _ in cands)
        try:
            rid = next(it)
        except StopIteration:
            raise ChoiceOutOfVocabulary("recorded step is missing an argument choice") from None
        contexts.append(ChoiceContext(tuple(base + _stage_indices(2, verb=verb, position=pos)), ids, rid))
    if next(it, None) is not None:
        raise ChoiceOutOfVocabulary("recorded step has surplus choices")
    return tuple(contexts)


def _sample_index(probs: np.ndarray, rng, greedy: bool) -> int:
    if greedy:
        return int(np.argmax(probs))
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(k, len(probs) - 1)


def sample_response(
    params: PolicyParams,
    trajectory: Trajectory,
    spec: Optional[TaskSpec] = None,
    rng=None,
    greedy: bool = False,
    belief: Optional[Belief] = None,
) -> StepResponse:
    """Sample thought, verb and argument references in order and render the response.

    ``belief`` may be passed to avoid replaying the history; it must equal
    ``belief_of(trajectory)``.
    """
    spec = spec or trajectory.spec
    if rng is None and not greedy:
        raise ValueError("sampling requires an rng")
    b = belief if belief is not None else belief_of(trajectory)
    base = _base_indices(b, spec)
    w = params.weights

    def draw(stage_idx, cands):
        feats = base + stage_idx
        logits = w[feats][:, list(cands)].sum(axis=0)
        dist = ChoiceDistribution.from_logits(logits, cands)
        k = _sample_index(dist.probabilities, rng, greedy)
        return ChoiceContext(tuple(feats), tuple(cands), cands[k]), float(dist.log_probabilities()[k])

    contexts, logps = [], []
    ctx, lp = draw(_stage_indices(0), THOUGHT_IDS)
    contexts.append(ctx), logps.append(lp)
    tid = ctx.chosen
    ctx, lp = draw(_stage_indices(1, thought=tid), VERB_IDS)
    contexts.append(ctx), logps.append(lp)
    verb = VERBS[ctx.chosen - N_THOUGHTS]
    args = []
    for pos in range(ARITY[verb]):
        cands = candidates_for(verb, pos, b, spec)
        ids = [REF_ID[r] for r, _ in cands]
        ctx, lp = draw(_stage_indices(2, verb=verb, position=pos), ids)
        contexts.append(ctx), logps.append(lp)
        args.append(dict(zip(ids, (e for _, e in cands)))[ctx.chosen])
    thought = _render_thought(tid, spec)
    action_text = _render_action(verb, args)
    raw = f"Thought: {thought}\nAction: {action_text}"
    thought, action_text = parse_response(raw)
    try:
        parsed = parse_action(action_text, spec)
    except GrammarError:
        parsed = None
    return StepResponse(
        thought=thought,
        action_text=action_text,
        parsed=parsed,
        token_log_probs=tuple(logps),
        total_log_prob=float(sum(logps)),
        choices=tuple(c.chosen for c in contexts),
        contexts=tuple(contexts),
    )


def step_contexts(trajectory: Trajectory, response: StepResponse, recompute: bool = False) -> tuple:
    """Choice contexts of ``response`` given the prefix ``trajectory``."""
    if response.contexts is not None and not recompute:
        return response.contexts
    return _contexts_for(belief_of(trajectory), trajectory.spec, response.choices)


def choice_distributions(params: PolicyParams, trajectory: Trajectory, response: StepResponse, recompute=False):
    return [ctx.distribution(params) for ctx in step_contexts(trajectory, response, recompute)]


def log_prob(params: PolicyParams, trajectory: Trajectory, response: StepResponse, recompute=False) -> float:
    """``log pi(thought, action | prefix)`` of the recorded choices under ``params``."""
    total = 0.0
    for ctx in step_contexts(trajectory, response, recompute):
        dist = ctx.distribution(params)
        total += float(dist.log_probabilities()[dist.candidate_ids.index(ctx.chosen)])
    return total


def grad_log_prob(params: PolicyParams, trajectory: Trajectory, response: StepResponse, recompute=False) -> np.ndarray:
    grad = np.zeros_like(params.weights)
    for ctx in step_contexts(trajectory, response, recompute):
        dist = ctx.distribution(params)
        delta = -dist.probabilities
        delta[dist.candidate_ids.index(ctx.chosen)] += 1.0
        grad[np.ix_(list(ctx.features), list(ctx.candidate_ids))] += delta
    return grad


def _kl(p: ChoiceDistribution, q: ChoiceDistribution) -> float:
    return float(np.dot(p.probabilities, p.log_probabilities() - q.log_probabilities()))


def kl_step(params_p: PolicyParams, params_q: PolicyParams, trajectory: Trajectory, response: StepResponse, recompute=False) -> float:
    """Exact ``KL(p || q)`` summed over the step's choice distributions."""
    total = 0.0
    for ctx in step_contexts(trajectory, response, recompute):
        total += _kl(ctx.distribution(params_p), ctx.distribution(params_q))
    return max(total, 0.0)


def grad_kl_step(params_p: PolicyParams, params_q: PolicyParams, trajectory: Trajectory, response: StepResponse, recompute=False) -> np.ndarray:
    """Gradient of :func:`kl_step` with respect to the weights of ``params_p``."""
    grad = np.zeros_like(params_p.weights)
    for ctx in step_contexts(trajectory, response, recompute):
        p = ctx.distribution(params_p)
        q = ctx.distribution(params_q)
        lp, lq = p.log_probabilities(), q.log_probabilities()
        kl = float(np.dot(p.probabilities, lp - lq))
        dz = p.probabilities * (lp - lq - kl)
        grad[np.ix_(list(ctx.features), list(ctx.candidate_ids))] += dz
    return grad


# ---------------------------------------------------------------- checkpoints


def save_params(params: PolicyParams, path, step_index: int = 0) -> None:
    """Text dump: one JSON header line, then one row of weights per feature."""
    header = {"feature_dim": params.feature_dim, "choice_vocab": params.choice_vocab, "step_index": int(step_index)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        np.savetxt(fh, params.weights, fmt="%.17g")


def load_params(path):
    """Returns ``(params, header)``."""
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        w = np.loadtxt(fh, ndmin=2)
    w = w.reshape(header["feature_dim"], header["choice_vocab"])
    return PolicyParams(w), header
