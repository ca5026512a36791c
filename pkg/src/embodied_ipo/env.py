"""Seeded, partially observable text-home environment.

A world is a handful of rooms holding receptacles (counters, cabinets, a
microwave, ...) and small objects.  The agent walks between locations, opens
containers, carries one object at a time and applies appliances to it.  Every
transition is a pure function of ``(state, action)``; states are never mutated.

``Easy`` difficulty turns on five assists that remove low-level bottlenecks
(teleporting, pre-opened containers, a goal-location hint, remote appliance
use and a whole-house map).  ``Normal`` keeps only the map and the hint.
"""

from __future__ import annotations

import enum
import json
import random
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping, Optional

from .exceptions import EpisodeAlreadyTerminated, UnknownTaskType

NOTHING_HAPPENS = "Nothing happens"
DEFAULT_MAX_STEPS = 30


class TaskType(str, enum.Enum):
    PICK = "Pick"
    LOOK = "Look"
    HEAT = "Heat"
    COOL = "Cool"
    CLEAN = "Clean"
    PICK_TWO = "PickTwo"


class Difficulty(str, enum.Enum):
    EASY = "Easy"
    NORMAL = "Normal"


class Split(str, enum.Enum):
    SEEN = "Seen"
    UNSEEN = "Unseen"


class Verb(str, enum.Enum):
    GOTO = "GoTo"
    OPEN = "Open"
    CLOSE = "Close"
    TAKE = "Take"
    PUT = "Put"
    HEAT = "Heat"
    COOL = "Cool"
    CLEAN = "Clean"
    EXAMINE = "Examine"
    INVENTORY = "Inventory"
    DONE = "Done"


VERBS = tuple(Verb)
ARITY = {
    Verb.GOTO: 1,
    Verb.OPEN: 1,
    Verb.CLOSE: 1,
    Verb.TAKE: 1,
    Verb.PUT: 2,
    Verb.HEAT: 1,
    Verb.COOL: 1,
    Verb.CLEAN: 1,
    Verb.EXAMINE: 1,
    Verb.INVENTORY: 0,
    Verb.DONE: 0,
}


class Assist(str, enum.Enum):
    TELEPORT = "teleport"
    PREOPENED = "preopened"
    GOAL_HINT = "goal_hint"
    REMOTE_APPLIANCE = "remote_appliance"
    HOUSE_MAP = "house_map"


ASSISTS = {
    Difficulty.EASY: frozenset(Assist),
    Difficulty.NORMAL: frozenset({Assist.GOAL_HINT, Assist.HOUSE_MAP}),
}

ROOMS = ("kitchen", "livingroom", "bedroom", "bathroom")

# kind -> (openable, canonical room index)
STORAGE_KINDS = {
    "countertop": (False, 0),
    "cabinet": (True, 0),
    "diningtable": (False, 1),
    "shelf": (False, 1),
    "sofa": (False, 1),
    "drawer": (True, 2),
    "desk": (False, 2),
    "sidetable": (False, 2),
    "safe": (True, 2),
    "dresser": (True, 3),
    "garbagecan": (False, 3),
}

# task appliances; the desklamp is a fixture that does not hold objects
APPLIANCES = {
    "microwave": 0,
    "fridge": 0,
    "sinkbasin": 3,
    "desklamp": 1,
}
TASK_APPLIANCE = {
    TaskType.HEAT: "microwave 1",
    TaskType.COOL: "fridge 1",
    TaskType.CLEAN: "sinkbasin 1",
    TaskType.LOOK: "desklamp 1",
}
APPLIANCE_VERB = {
    Verb.HEAT: "microwave 1",
    Verb.COOL: "fridge 1",
    Verb.CLEAN: "sinkbasin 1",
}

GOAL_KINDS = (
    "apple", "mug", "potato", "bread", "tomato", "egg",
    "cup", "plate", "book", "pencil", "cd", "spoon",
)
SEEN_DISTRACTORS = (
    "knife", "fork", "bowl", "vase", "pen", "keychain",
    "newspaper", "remotecontrol", "candle", "soapbar", "towel", "pillow",
)
UNSEEN_DISTRACTORS = (
    "statue", "watch", "creditcard", "laptop", "cellphone", "box",
    "houseplant", "tissuebox", "spatula", "ladle", "kettle", "saltshaker",
)

INSTRUCTIONS = {
    TaskType.PICK: "put a {kind} in {target}.",
    TaskType.PICK_TWO: "put two {kind} in {target}.",
    TaskType.HEAT: "heat some {kind} and put it in {target}.",
    TaskType.COOL: "cool some {kind} and put it in {target}.",
    TaskType.CLEAN: "clean some {kind} and put it in {target}.",
    TaskType.LOOK: "look at {kind} under the desklamp.",
}

UNSEEN_MODULUS = 5


def split_of_seed(seed: int) -> Split:
    """Layout seeds congruent to 4 mod 5 are held out (an 80/20 partition)."""
    return Split.UNSEEN if seed % UNSEEN_MODULUS == UNSEEN_MODULUS - 1 else Split.SEEN


def kind_of(entity: str) -> str:
    return entity.rsplit(" ", 1)[0]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    task_type: TaskType
    instruction: str
    seed: int
    split: Split
    difficulty: Difficulty
    goal_kind: str
    target: Optional[str]
    entities: tuple = ()

    @property
    def appliance(self) -> Optional[str]:
        return TASK_APPLIANCE.get(self.task_type)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "task_type": self.task_type.value,
            "seed": self.seed,
            "difficulty": self.difficulty.value,
            "split": self.split.value,
        }


@dataclass(frozen=True)
class Receptacle:
    kind: str
    room: str
    openable: bool
    is_open: bool
    contents: tuple = ()

    @property
    def accessible(self) -> bool:
        return self.is_open or not self.openable

    @property
    def holds_objects(self) -> bool:
        return self.kind != "desklamp"


@dataclass(frozen=True)
class Thing:
    kind: str
    thermal: str = "ambient"
    clean: bool = False


@dataclass(frozen=True)
class WorldState:
    rooms: tuple
    receptacles: Mapping[str, Receptacle]
    objects: Mapping[str, Thing]
    agent_location: str
    inventory: Optional[str] = None
    step_count: int = 0
    terminated: bool = False
    looked: tuple = ()
    max_steps: int = DEFAULT_MAX_STEPS
    assists: frozenset = field(default_factory=frozenset)

    def room_of(self, location: str) -> str:
        if location in self.receptacles:
            return self.receptacles[location].room
        return location

    def place_of(self, obj: str) -> str:
        if self.inventory == obj:
            return "inventory"
        for rid, rec in self.receptacles.items():
            if obj in rec.contents:
                return rid
        raise KeyError(obj)

    def to_dict(self) -> dict:
        return {
            "rooms": list(self.rooms),
            "receptacles": {
                rid: {
                    "kind": r.kind,
                    "location": r.room,
                    "openable": r.openable,
                    "open": r.is_open,
                    "contents": sorted(r.contents),
                }
                for rid, r in self.receptacles.items()
            },
            "objects": {
                oid: {"kind": o.kind, "thermal": o.thermal, "clean": o.clean}
                for oid, o in self.objects.items()
            },
            "agent_location": self.agent_location,
            "inventory": self.inventory,
            "step_count": self.step_count,
            "terminated": self.terminated,
            "looked": sorted(self.looked),
            "max_steps": self.max_steps,
            "assists": sorted(a.value for a in self.assists),
        }

    def content_key(self) -> tuple:
        """Hashable key of everything except the step counter."""
        return (
            self.agent_location,
            self.inventory,
            self.terminated,
            self.looked,
            tuple(sorted((k, r.is_open, r.contents) for k, r in self.receptacles.items())),
            tuple(sorted((k, o.thermal, o.clean) for k, o in self.objects.items())),
        )


def serialize_state(state: WorldState) -> str:
    """Canonical sorted-key JSON encoding of a world snapshot."""
    return json.dumps(state.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Observation:
    text: str
    valid: bool = True
    done_hint: bool = False
    # structured mirror of what ``text`` renders; never carries more than the text
    location: Optional[str] = None
    visible: Optional[tuple] = None
    closed: Optional[bool] = None
    listed: tuple = ()
    hints: tuple = ()


INVALID = Observation(NOTHING_HAPPENS, valid=False)


@dataclass(frozen=True)
class ParsedAction:
    verb: Verb
    args: tuple = ()

    def __post_init__(self):
        if len(self.args) != ARITY[self.verb]:
            raise ValueError(f"{self.verb.value} takes {ARITY[self.verb]} args, got {len(self.args)}")

    def to_text(self) -> str:
        a = self.args
        v = self.verb
        if v is Verb.GOTO:
            return f"go to {a[0]}"
        if v is Verb.PUT:
            return f"put {a[0]} in {a[1]}"
        if v in (Verb.INVENTORY, Verb.DONE):
            return v.value.lower()
        return f"{v.value.lower()} {a[0]}"


# ---------------------------------------------------------------- generation


def _coerce(enum_cls, value, error):
    if isinstance(value, enum_cls):
        return value
    for member in enum_cls:
        if value == member.value or value == member.name:
            return member
    raise error(f"unknown {enum_cls.__name__}: {value!r}")


def _layout(seed: int, split: Split):
    rng = random.Random(f"layout:{seed}")
    n_rooms = rng.randint(2, 4)
    rooms = tuple(ROOMS[:n_rooms])
    n_storage = rng.randint(4, 8)
    kinds = sorted(STORAGE_KINDS)
    counts: dict[str, int] = {}
    storage = []
    for _ in range(n_storage):
        kind = rng.choice(kinds)
        counts[kind] = counts.get(kind, 0) + 1
        storage.append(f"{kind} {counts[kind]}")
    recs = {}
    for rid in storage:
        openable, home = STORAGE_KINDS[kind_of(rid)]
        if split is Split.UNSEEN:
            room = rng.choice(rooms)
        else:
            room = rooms[home % n_rooms]
        recs[rid] = (kind_of(rid), room, openable)
    for kind, home in APPLIANCES.items():
        room = rng.choice(rooms) if split is Split.UNSEEN else rooms[home % n_rooms]
        recs[f"{kind} 1"] = (kind, room, False)
    start = rng.choice(rooms)
    return rooms, recs, storage, start


@lru_cache(maxsize=None)
def _generate(seed: int, task_type: TaskType, difficulty: Difficulty, max_steps: int):
    split = split_of_seed(seed)
    rooms, recs, storage, start = _layout(seed, split)
    rng = random.Random(f"task:{seed}:{task_type.value}")
    goal_kind = rng.choice(GOAL_KINDS)
    target = None if task_type is TaskType.LOOK else rng.choice(storage)
    n_goal = 2 if task_type is TaskType.PICK_TWO else 1
    n_objects = rng.randint(6, 12)
    vocab = UNSEEN_DISTRACTORS if split is Split.UNSEEN else SEEN_DISTRACTORS
    objects = [f"{goal_kind} {i + 1}" for i in range(n_goal)]
    counts: dict[str, int] = {}
    for _ in range(n_objects - n_goal):
        kind = rng.choice(vocab)
        counts[kind] = counts.get(kind, 0) + 1
        objects.append(f"{kind} {counts[kind]}")
    placement: dict[str, list] = {rid: [] for rid in recs}
    for oid in objects:
        options = storage
        if kind_of(oid) == goal_kind and target is not None:
            options = [r for r in storage if r != target]
        placement[rng.choice(options)].append(oid)
    assists = ASSISTS[difficulty]
    preopen = Assist.PREOPENED in assists
    receptacles = {
        rid: Receptacle(
            kind=kind,
            room=room,
            openable=openable,
            is_open=(not openable) or preopen,
            contents=tuple(sorted(placement[rid])),
        )
        for rid, (kind, room, openable) in sorted(recs.items())
    }
    state = WorldState(
        rooms=rooms,
        receptacles=receptacles,
        objects={oid: Thing(kind_of(oid)) for oid in sorted(objects)},
        agent_location=start,
        max_steps=max_steps,
        assists=assists,
    )
    entities = tuple(sorted(set(rooms) | set(receptacles) | set(objects)))
    spec = TaskSpec(
        task_id=f"{task_type.value}-{difficulty.value}-{seed}",
        task_type=task_type,
        instruction=INSTRUCTIONS[task_type].format(kind=goal_kind, target=target),
        seed=seed,
        split=split,
        difficulty=difficulty,
        goal_kind=goal_kind,
        target=target,
        entities=entities,
    )
    return spec, state


def generate_task(seed, task_type, difficulty=Difficulty.EASY, max_steps=DEFAULT_MAX_STEPS, verify=False):
    """Build the task and its initial world for ``(seed, task_type, difficulty)``.

    With ``verify=True`` the breadth-first solver confirms a plan of at most
    ``max_steps`` actions exists before returning.
    """
    task_type = _coerce(TaskType, task_type, UnknownTaskType)
    difficulty = _coerce(Difficulty, difficulty, ValueError)
    if int(seed) < 0:
        raise ValueError("seed must be non-negative")
    spec, state = _generate(int(seed), task_type, difficulty, int(max_steps))
    if verify:
        plan = solve(spec, state)
        if plan is None or len(plan) > max_steps:
            raise RuntimeError(f"generated task {spec.task_id} is not solvable within {max_steps} steps")
    return spec, state


def reset(spec: TaskSpec, max_steps: int = DEFAULT_MAX_STEPS):
    """Fresh initial state and the first observation for ``spec``."""
    _, state = _generate(spec.seed, spec.task_type, spec.difficulty, int(max_steps))
    return state, initial_observation(state, spec)


# ---------------------------------------------------------------- rendering


def _listing(items) -> str:
    items = [f"a {i}" for i in items]
    if not items:
        return "nothing"
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + f", and {items[-1]}"


def _receptacles_in(state: WorldState, room: str):
    return [rid for rid, r in state.receptacles.items() if r.room == room]


def _room_view(state: WorldState, room: str) -> Observation:
    recs = _receptacles_in(state, room)
    exits = [r for r in state.rooms if r != room]
    text = f"You are in the {room}. Looking quickly around you, you see {_listing(recs)}."
    if Assist.TELEPORT not in state.assists and exits:
        text += " Exits lead to " + ", ".join(exits) + "."
    return Observation(text, location=room, listed=tuple((r, room) for r in recs))


def _receptacle_view(state: WorldState, rid: str, prefix: str) -> Observation:
    rec = state.receptacles[rid]
    if not rec.accessible:
        return Observation(f"{prefix}The {rid} is closed.", location=rid, closed=True, visible=())
    prep = "In it" if rec.openable else f"On the {rid}"
    opened = f"The {rid} is open. " if rec.openable else ""
    text = f"{prefix}{opened}{prep}, you see {_listing(rec.contents)}."
    return Observation(text, location=rid, closed=False, visible=rec.contents)


def initial_observation(state: WorldState, spec: TaskSpec) -> Observation:
    room = state.room_of(state.agent_location)
    view = _room_view(state, room)
    parts = [view.text]
    listed = view.listed
    if Assist.HOUSE_MAP in state.assists:
        entries = []
        for r in state.rooms:
            entries.append(f"the {r} has {_listing(_receptacles_in(state, r))}")
        parts.append("Map of the house: " + "; ".join(entries) + ".")
        listed = tuple((rid, rec.room) for rid, rec in state.receptacles.items())
    hints = ()
    if Assist.GOAL_HINT in state.assists:
        hints = tuple(
            (oid, state.place_of(oid)) for oid in state.objects if kind_of(oid) == spec.goal_kind
        )
        for oid, where in hints:
            parts.append(f"You remember that the {oid} is in the {where}.")
    parts.append(f"Your task is to: {spec.instruction}")
    return Observation(" ".join(parts), location=room, listed=listed, hints=hints)


# ---------------------------------------------------------------- dynamics


def _with_contents(state: WorldState, rid: str, contents) -> dict:
    recs = dict(state.receptacles)
    recs[rid] = replace(recs[rid], contents=tuple(sorted(contents)))
    return recs


def _transition(state: WorldState, action: ParsedAction):
    """Apply ``action``; returns ``(new_state, observation)`` or ``None`` if it has no effect."""
    verb, args = action.verb, action.args
    here = state.agent_location
    at_rec = state.receptacles.get(here)
    teleport = Assist.TELEPORT in state.assists
    remote = Assist.REMOTE_APPLIANCE in state.assists

    if verb is Verb.GOTO:
        dest = args[0]
        if dest == here:
            return None
        if dest in state.receptacles:
            if not teleport and state.receptacles[dest].room != state.room_of(here):
                return None
            new = replace(state, agent_location=dest)
            return new, _receptacle_view(new, dest, f"You arrive at {dest}. ")
        if dest in state.rooms:
            new = replace(state, agent_location=dest)
            return new, _room_view(new, dest)
        return None

    if verb in (Verb.OPEN, Verb.CLOSE):
        rid = args[0]
        if rid != here or at_rec is None or not at_rec.openable:
            return None
        if verb is Verb.OPEN:
            if at_rec.is_open:
                return None
            recs = dict(state.receptacles)
            recs[rid] = replace(at_rec, is_open=True)
            new = replace(state, receptacles=recs)
            return new, _receptacle_view(new, rid, f"You open the {rid}. ")
        if not at_rec.is_open:
            return None
        recs = dict(state.receptacles)
        recs[rid] = replace(at_rec, is_open=False)
        return replace(state, receptacles=recs), Observation(f"You close the {rid}.", location=rid, closed=True, visible=())

    if verb is Verb.TAKE:
        obj = args[0]
        if state.inventory is not None or at_rec is None or not at_rec.accessible:
            return None
        if obj not in at_rec.contents:
            return None
        recs = _with_contents(state, here, [o for o in at_rec.contents if o != obj])
        new = replace(state, receptacles=recs, inventory=obj)
        return new, Observation(f"You pick up the {obj} from the {here}.")

    if verb is Verb.PUT:
        obj, rid = args
        if state.inventory != obj or rid != here or at_rec is None:
            return None
        if not at_rec.accessible or not at_rec.holds_objects:
            return None
        recs = _with_contents(state, here, at_rec.contents + (obj,))
        new = replace(state, receptacles=recs, inventory=None)
        return new, Observation(f"You put the {obj} in the {rid}.")

    if verb in APPLIANCE_VERB:
        obj = args[0]
        appliance = APPLIANCE_VERB[verb]
        if state.inventory != obj or (here != appliance and not remote):
            return None
        thing = state.objects[obj]
        if verb is Verb.HEAT:
            thing = replace(thing, thermal="heated")
        elif verb is Verb.COOL:
            thing = replace(thing, thermal="cooled")
        else:
            thing = replace(thing, clean=True)
        objects = dict(state.objects)
        objects[obj] = thing
        word = {Verb.HEAT: "heat", Verb.COOL: "cool", Verb.CLEAN: "clean"}[verb]
        return replace(state, objects=objects), Observation(f"You {word} the {obj} using the {appliance}.")

    if verb is Verb.EXAMINE:
        x = args[0]
        if x == here and at_rec is not None:
            return state, _receptacle_view(state, here, "")
        if x in state.rooms and x == here:
            return state, _room_view(state, here)
        if x == state.inventory:
            if here == "desklamp 1" or remote:
                looked = tuple(sorted(set(state.looked) | {x}))
                return replace(state, looked=looked), Observation(f"You examine the {x} under the desklamp 1.")
            return state, Observation(f"There's nothing special about the {x}.")
        if at_rec is not None and at_rec.accessible and x in at_rec.contents:
            return state, Observation(f"There's nothing special about the {x}.")
        return None

    if verb is Verb.INVENTORY:
        if state.inventory is None:
            return state, Observation("You are not carrying anything.")
        return state, Observation(f"You are carrying: a {state.inventory}.")

    if verb is Verb.DONE:
        return replace(state, terminated=True), Observation("You declare that the task is finished.")

    return None


def step(state: WorldState, action: Optional[ParsedAction], spec: Optional[TaskSpec] = None):
    """One environment transition.

    ``action=None`` stands for a response that could not be parsed; it costs a
    step and yields the invalid-action sentinel.  Returns ``(state, observation, done)``.
    """
    if state.terminated:
        raise EpisodeAlreadyTerminated("step called after the episode terminated")
    if state.step_count >= state.max_steps:
        raise EpisodeAlreadyTerminated("step budget already exhausted")
    result = _transition(state, action) if action is not None else None
    if result is None:
        new, obs = state, INVALID
    else:
        new, obs = result
    new = replace(new, step_count=state.step_count + 1)
    reached = goal_check(new, spec) if spec is not None else False
    if reached != obs.done_hint:
        obs = replace(obs, done_hint=reached)
    done = new.terminated or reached or new.step_count >= new.max_steps
    return new, obs, done


def goal_check(state: WorldState, spec: TaskSpec) -> bool:
    kind = spec.goal_kind
    tt = spec.task_type
    if tt is TaskType.LOOK:
        return any(kind_of(o) == kind for o in state.looked)
    contents = state.receptacles[spec.target].contents
    placed = [o for o in contents if kind_of(o) == kind]
    if tt is TaskType.PICK:
        return len(placed) >= 1
    if tt is TaskType.PICK_TWO:
        return len(placed) >= 2
    if tt is TaskType.HEAT:
        return any(state.objects[o].thermal == "heated" for o in placed)
    if tt is TaskType.COOL:
        return any(state.objects[o].thermal == "cooled" for o in placed)
    return any(state.objects[o].clean for o in placed)


# ---------------------------------------------------------------- oracle


def _candidate_actions(state: WorldState, spec: TaskSpec):
    goal_objs = [o for o in state.objects if kind_of(o) == spec.goal_kind]
    places = set(state.rooms)
    for o in goal_objs:
        if state.inventory != o:
            places.add(state.place_of(o))
    if spec.target:
        places.add(spec.target)
    if spec.appliance:
        places.add(spec.appliance)
    for p in sorted(places):
        yield ParsedAction(Verb.GOTO, (p,))
    here = state.agent_location
    if here in state.receptacles:
        yield ParsedAction(Verb.OPEN, (here,))
        for o in goal_objs:
            yield ParsedAction(Verb.TAKE, (o,))
        if state.inventory is not None:
            yield ParsedAction(Verb.PUT, (state.inventory, here))
    if state.inventory is not None:
        for verb in (Verb.HEAT, Verb.COOL, Verb.CLEAN, Verb.EXAMINE):
            yield ParsedAction(verb, (state.inventory,))


def solve(spec: TaskSpec, state: Optional[WorldState] = None, max_depth: int = DEFAULT_MAX_STEPS):
    """Shortest goal-reaching action list found by breadth-first search, or ``None``.

    The search runs the real transition function over a task-relevant action
    subset (moves between rooms and goal-relevant places, manipulation of goal
    objects), so every returned plan is executable as-is.
    """
    if state is None:
        state, _ = reset(spec)
    state = replace(state, max_steps=10**9, step_count=0)
    if goal_check(state, spec):
        return []
    frontier = deque([(state, ())])
    seen = {state.content_key()}
    while frontier:
        cur, plan = frontier.popleft()
        if len(plan) >= max_depth:
            continue
        for action in _candidate_actions(cur, spec):
            result = _transition(cur, action)
            if result is None:
                continue
            nxt = result[0]
            key = nxt.content_key()
            if key in seen:
                continue
            new_plan = plan + (action,)
            if goal_check(nxt, spec):
                return list(new_plan)
            seen.add(key)
            frontier.append((nxt, new_plan))
    return None
