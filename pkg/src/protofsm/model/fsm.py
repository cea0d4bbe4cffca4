"""Protocol state machine model: the quintuple (alphabet, states, initial, final, transitions).

Transitions form a relation, so a (state, message) pair may lead to several
next states. `determinize` turns such a machine into a deterministic one and
`diff` compares two machines inferred from different implementations.
"""

from __future__ import annotations

import logging
import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from protofsm.errors import CanonicalNameError, InvalidFsm


logger = logging.getLogger(__name__)

_NON_ALNUM = re.compile(r"[^0-9A-Za-z]+")


def canonicalize_name(raw: str) -> str:
    """'Client Hello' -> 'CLIENT_HELLO'. Idempotent."""
    name = _NON_ALNUM.sub("_", raw.strip()).strip("_").upper()
    if not name:
        raise CanonicalNameError(f"name {raw!r} is empty after canonicalization")
    return name


def is_canonical(name: str) -> bool:
    try:
        return canonicalize_name(name) == name
    except CanonicalNameError:
        return False


@dataclass(frozen=True, order=True)
class Transition:
    current_state: str
    receive_message: str
    next_state: str

    def canonical(self) -> Transition:
        return Transition(
            canonicalize_name(self.current_state),
            canonicalize_name(self.receive_message),
            canonicalize_name(self.next_state),
        )

    def __str__(self):
        return f"{self.current_state} --{self.receive_message}--> {self.next_state}"


@dataclass(frozen=True)
class Implementation:
    repo: str = ""
    commit: str = ""


@dataclass(frozen=True)
class FsmModel:
    protocol: str
    implementation: Implementation
    alphabet: frozenset[str]
    states: frozenset[str]
    initial_states: frozenset[str]
    final_states: frozenset[str]
    transitions: frozenset[Transition]

    @classmethod
    def build(
        cls,
        protocol: str,
        states: Iterable[str],
        alphabet: Iterable[str],
        transitions: Iterable[Transition | tuple[str, str, str]],
        initial_states: Iterable[str],
        final_states: Iterable[str] = (),
        implementation: Implementation | None = None,
    ) -> FsmModel:
        """Construct from loose inputs, canonicalizing every name."""
        return cls(
            protocol=protocol,
            implementation=implementation or Implementation(),
            alphabet=frozenset(canonicalize_name(m) for m in alphabet),
            states=frozenset(canonicalize_name(s) for s in states),
            initial_states=frozenset(canonicalize_name(s) for s in initial_states),
            final_states=frozenset(canonicalize_name(s) for s in final_states),
            transitions=frozenset(
                (t if isinstance(t, Transition) else Transition(*t)).canonical() for t in transitions
            ),
        )

    def outgoing(self) -> dict[str, list[Transition]]:
        """Transitions grouped by source state, each group sorted."""
        grouped: dict[str, list[Transition]] = {}
        for t in sorted(self.transitions):
            grouped.setdefault(t.current_state, []).append(t)
        return grouped

    def successors(self, states: Iterable[str], message: str) -> frozenset[str]:
        states = set(states)
        return frozenset(
            t.next_state for t in self.transitions if t.current_state in states and t.receive_message == message
        )

    def accepts(self, messages: Iterable[str]) -> bool:
        """Set-of-states simulation; accepted iff a final state is reachable after the whole sequence."""
        current = frozenset(self.initial_states)
        for m in messages:
            current = self.successors(current, m)
            if not current:
                return False
        return bool(current & self.final_states)

    def is_deterministic(self) -> bool:
        seen = set()
        for t in self.transitions:
            key = (t.current_state, t.receive_message)
            if key in seen:
                return False
            seen.add(key)
        return len(self.initial_states) <= 1

    def renamed(self, mapping: dict[str, str]) -> FsmModel:
        """Apply a name mapping to states and messages alike."""

        def r(name):
            return mapping.get(name, name)

        return FsmModel(
            protocol=self.protocol,
            implementation=self.implementation,
            alphabet=frozenset(r(m) for m in self.alphabet),
            states=frozenset(r(s) for s in self.states),
            initial_states=frozenset(r(s) for s in self.initial_states),
            final_states=frozenset(r(s) for s in self.final_states),
            transitions=frozenset(
                Transition(r(t.current_state), r(t.receive_message), r(t.next_state)) for t in self.transitions
            ),
        )


# validation


class Level(str, Enum):
    STRICT = "strict"
    LENIENT = "lenient"


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self):
        return self.message


def validate(fsm: FsmModel, level: Level | str = Level.STRICT) -> list[Violation]:
    """Every invariant violation of fsm at the given level. Never raises, never mutates."""
    level = Level(level)
    found: list[Violation] = []

    if not fsm.alphabet:
        found.append(Violation("alphabet_empty", "alphabet empty"))
    if not fsm.states:
        found.append(Violation("states_empty", "states empty"))
    if not fsm.initial_states:
        found.append(Violation("initial_states_empty", "initial_states empty"))
    if not fsm.final_states:
        if level is Level.STRICT:
            found.append(Violation("final_states_empty", "final_states empty"))
        else:
            logger.warning(f"{fsm.protocol}: final_states empty (accepted at lenient level)")

    for name in sorted(fsm.states | fsm.alphabet | fsm.initial_states | fsm.final_states):
        if not is_canonical(name):
            found.append(Violation("name_not_canonical", f"name not canonical: {name!r}"))

    for s in sorted(fsm.initial_states - fsm.states):
        found.append(Violation("unknown_initial_state", f"initial state {s} not in states"))
    for s in sorted(fsm.final_states - fsm.states):
        found.append(Violation("unknown_final_state", f"final state {s} not in states"))

    unknown_states: set[str] = set()
    unknown_messages: set[str] = set()
    for t in fsm.transitions:
        for s in (t.current_state, t.next_state):
            if s not in fsm.states:
                unknown_states.add(s)
        if t.receive_message not in fsm.alphabet:
            unknown_messages.add(t.receive_message)
    for s in sorted(unknown_states):
        found.append(Violation("unknown_state", f"unknown state {s}"))
    for m in sorted(unknown_messages):
        found.append(Violation("unknown_message", f"unknown message {m}"))

    return found


def require_valid(fsm: FsmModel, level: Level | str) -> FsmModel:
    violations = validate(fsm, level)
    if violations:
        raise InvalidFsm(violations)
    return fsm


# determinization


def subset_name(members: Iterable[str]) -> str:
    return "_".join(sorted(members))


def determinize(fsm: FsmModel) -> FsmModel:
    """Subset construction from the single start subset S0.

    Only reachable, non-empty subsets are emitted; a subset is final when it
    contains a final state. There are no epsilon moves, so no closure step.
    """
    require_valid(fsm, Level.LENIENT)

    delta: dict[tuple[str, str], set[str]] = {}
    for t in fsm.transitions:
        delta.setdefault((t.current_state, t.receive_message), set()).add(t.next_state)

    alphabet = sorted(fsm.alphabet)
    start = frozenset(fsm.initial_states)
    names: dict[frozenset[str], str] = {}
    # singletons keep their state name; merged subsets take the next free suffix
    taken = set(fsm.states)
    transitions: set[Transition] = set()
    finals: set[str] = set()

    def name_of(subset: frozenset[str]) -> str:
        if subset in names:
            return names[subset]
        if len(subset) == 1:
            name = next(iter(subset))
        else:
            name = base = subset_name(subset)
            n = 2
            while name in taken:
                name = f"{base}_{n}"
                n += 1
            taken.add(name)
        names[subset] = name
        return name

    queue = deque([start])
    visited = {start}
    name_of(start)
    while queue:
        subset = queue.popleft()
        src = name_of(subset)
        if subset & fsm.final_states:
            finals.add(src)
        for m in alphabet:
            target = frozenset(s for member in subset for s in delta.get((member, m), ()))
            if not target:
                continue
            transitions.add(Transition(src, m, name_of(target)))
            if target not in visited:
                visited.add(target)
                queue.append(target)

    return FsmModel(
        protocol=fsm.protocol,
        implementation=fsm.implementation,
        alphabet=fsm.alphabet,
        states=frozenset(names.values()),
        initial_states=frozenset([names[start]]),
        final_states=frozenset(finals),
        transitions=frozenset(transitions),
    )


# diffing


@dataclass(frozen=True)
class FsmDiff:
    states_only_in_a: frozenset[str]
    states_only_in_b: frozenset[str]
    messages_only_in_a: frozenset[str]
    messages_only_in_b: frozenset[str]
    transitions_only_in_a: frozenset[Transition]
    transitions_only_in_b: frozenset[Transition]
    shared_transitions: frozenset[Transition]
    summary: dict[str, int] = field(default_factory=dict)

    def mirrored(self) -> FsmDiff:
        return FsmDiff(
            states_only_in_a=self.states_only_in_b,
            states_only_in_b=self.states_only_in_a,
            messages_only_in_a=self.messages_only_in_b,
            messages_only_in_b=self.messages_only_in_a,
            transitions_only_in_a=self.transitions_only_in_b,
            transitions_only_in_b=self.transitions_only_in_a,
            shared_transitions=self.shared_transitions,
            summary=_summary(
                self.states_only_in_b,
                self.states_only_in_a,
                self.transitions_only_in_b,
                self.transitions_only_in_a,
                self.shared_transitions,
            ),
        )

    @property
    def is_empty(self) -> bool:
        return not (
            self.states_only_in_a
            or self.states_only_in_b
            or self.messages_only_in_a
            or self.messages_only_in_b
            or self.transitions_only_in_a
            or self.transitions_only_in_b
        )


def _summary(sa, sb, ta, tb, shared) -> dict[str, int]:
    return {
        "states_only_in_a": len(sa),
        "states_only_in_b": len(sb),
        "transitions_only_in_a": len(ta),
        "transitions_only_in_b": len(tb),
        "shared_transitions": len(shared),
    }


def diff(a: FsmModel, b: FsmModel) -> FsmDiff:
    require_valid(a, Level.LENIENT)
    require_valid(b, Level.LENIENT)

    a_trans = frozenset(t.canonical() for t in a.transitions)
    b_trans = frozenset(t.canonical() for t in b.transitions)
    a_states = frozenset(canonicalize_name(s) for s in a.states)
    b_states = frozenset(canonicalize_name(s) for s in b.states)
    a_msgs = frozenset(canonicalize_name(m) for m in a.alphabet)
    b_msgs = frozenset(canonicalize_name(m) for m in b.alphabet)

    sa, sb = a_states - b_states, b_states - a_states
    ta, tb, shared = a_trans - b_trans, b_trans - a_trans, a_trans & b_trans
    return FsmDiff(
        states_only_in_a=sa,
        states_only_in_b=sb,
        messages_only_in_a=a_msgs - b_msgs,
        messages_only_in_b=b_msgs - a_msgs,
        transitions_only_in_a=ta,
        transitions_only_in_b=tb,
        shared_transitions=shared,
        summary=_summary(sa, sb, ta, tb, shared),
    )
