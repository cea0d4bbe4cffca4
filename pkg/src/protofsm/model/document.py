"""FSM documents: the JSON form of an FsmModel.

Transitions are an object keyed by current_state whose values are arrays of
{receive_message, next_state}; this is also the shape the transitions stage
asks the chat model for, so fixtures and model-output parsing share it.
"""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, ValidationError

from protofsm.errors import ParseError, SchemaError
from protofsm.model.fsm import FsmDiff, FsmModel, Implementation, Transition, canonicalize_name
from protofsm.model.utils import dumps_document


class TransitionEdge(BaseModel):
    model_config = ConfigDict(extra="forbid")

    receive_message: str
    next_state: str


class ImplementationDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    repo: str
    commit: str


class FsmDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    protocol: str
    implementation: ImplementationDoc
    alphabet: list[str]
    states: list[str]
    initial_states: list[str]
    final_states: list[str]
    transitions: dict[str, list[TransitionEdge]]


def to_document(fsm: FsmModel) -> dict:
    """Ordered dict form; every set is emitted sorted."""
    transitions: dict[str, list[dict]] = {}
    for state, group in sorted(fsm.outgoing().items()):
        transitions[state] = [
            {"receive_message": t.receive_message, "next_state": t.next_state}
            for t in sorted(group, key=lambda t: (t.receive_message, t.next_state))
        ]
    return {
        "protocol": fsm.protocol,
        "implementation": {"repo": fsm.implementation.repo, "commit": fsm.implementation.commit},
        "alphabet": sorted(fsm.alphabet),
        "states": sorted(fsm.states),
        "initial_states": sorted(fsm.initial_states),
        "final_states": sorted(fsm.final_states),
        "transitions": transitions,
    }


def serialize(fsm: FsmModel) -> str:
    return dumps_document(to_document(fsm))


def _schema_error(e: ValidationError, what: str) -> SchemaError:
    missing, extra, other = [], [], []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "missing":
            missing.append(loc)
        elif err["type"] == "extra_forbidden":
            extra.append(loc)
        else:
            other.append(f"{loc}: {err['msg']}")
    message = f"{what} does not match the FSM document schema"
    if other:
        message += " (" + "; ".join(other) + ")"
    return SchemaError(message, missing=missing, extra=extra)


def from_document(data: dict, what: str = "document") -> FsmModel:
    if not isinstance(data, dict):
        raise SchemaError(f"{what} must be a JSON object")
    try:
        doc = FsmDocument.model_validate(data)
    except ValidationError as e:
        raise _schema_error(e, what) from e

    transitions = [
        Transition(current, edge.receive_message, edge.next_state).canonical()
        for current, edges in doc.transitions.items()
        for edge in edges
    ]
    return FsmModel(
        protocol=doc.protocol,
        implementation=Implementation(doc.implementation.repo, doc.implementation.commit),
        alphabet=frozenset(canonicalize_name(m) for m in doc.alphabet),
        states=frozenset(canonicalize_name(s) for s in doc.states),
        initial_states=frozenset(canonicalize_name(s) for s in doc.initial_states),
        final_states=frozenset(canonicalize_name(s) for s in doc.final_states),
        transitions=frozenset(transitions),
    )


def load_json(text: str, what: str = "document"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{what} is not valid JSON: {e.msg}", line=e.lineno, column=e.colno) from e


def parse(text: str, what: str = "document") -> FsmModel:
    return from_document(load_json(text, what), what)


def load_fsm(path: str | Path) -> FsmModel:
    path = Path(path)
    return parse(path.read_text(encoding="utf-8"), what=str(path))


def save_fsm(fsm: FsmModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize(fsm), encoding="utf-8")
    return path


# DOT rendering


def _dot_id(name: str) -> str:
    return '"' + name.replace('"', '\\"') + '"'


def to_dot(fsm: FsmModel) -> str:
    lines = [f"digraph {_dot_id(fsm.protocol or 'fsm')} {{", "  rankdir=LR;"]
    for s in sorted(fsm.states):
        shape = "doublecircle" if s in fsm.final_states else "circle"
        lines.append(f"  {_dot_id(s)} [shape={shape}];")
    for i, s in enumerate(sorted(fsm.initial_states)):
        lines.append(f'  "__start{i}" [shape=point];')
        lines.append(f'  "__start{i}" -> {_dot_id(s)};')
    for t in sorted(fsm.transitions):
        lines.append(f"  {_dot_id(t.current_state)} -> {_dot_id(t.next_state)} [label={_dot_id(t.receive_message)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _edge(t: Transition) -> dict:
    return {"current_state": t.current_state, "receive_message": t.receive_message, "next_state": t.next_state}


def diff_to_document(d: FsmDiff) -> dict:
    return {
        "summary": dict(d.summary),
        "states_only_in_a": sorted(d.states_only_in_a),
        "states_only_in_b": sorted(d.states_only_in_b),
        "messages_only_in_a": sorted(d.messages_only_in_a),
        "messages_only_in_b": sorted(d.messages_only_in_b),
        "transitions_only_in_a": [_edge(t) for t in sorted(d.transitions_only_in_a)],
        "transitions_only_in_b": [_edge(t) for t in sorted(d.transitions_only_in_b)],
        "shared_transitions": [_edge(t) for t in sorted(d.shared_transitions)],
    }


def diff_to_dot(d: FsmDiff) -> str:
    """Shared edges black, edges only in a red, edges only in b blue."""
    lines = ['digraph "diff" {', "  rankdir=LR;"]
    colored = (
        ("black", d.shared_transitions),
        ("red", d.transitions_only_in_a),
        ("blue", d.transitions_only_in_b),
    )
    for color, edges in colored:
        for t in sorted(edges):
            label = _dot_id(t.receive_message)
            lines.append(f"  {_dot_id(t.current_state)} -> {_dot_id(t.next_state)} [label={label}, color={color}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
