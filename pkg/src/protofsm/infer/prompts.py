"""Prompt templates of the staged inference.

A prompt is background text about the protocol, a task instruction and the
stage template, joined in that order. Desired-format blocks are fixed text:
fixtures and documentation quote them verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from string import Template

from protofsm.augment.code_filter import protocol_key
from protofsm.errors import ConfigError, TemplateError


STAGES = ("code_paths", "states", "messages", "transitions")


DESIRED_FORMATS = {
    "code_paths": """Answer with a JSON array of repository-relative file paths inside a ```json code block, e.g.
```json
["src/sm/state_machine.c", "src/sm/state_machine.h"]
```""",
    "states": """Answer with a JSON object inside a ```json code block. List every state in "states", the states
the machine starts in under "initial_states" and the states where a session ends under "final_states", e.g.
```json
{"states": ["STATE_A", "STATE_B"], "initial_states": ["STATE_A"], "final_states": ["STATE_B"]}
```""",
    "messages": """Answer with a JSON array of message type names inside a ```json code block, e.g.
```json
["MESSAGE_A", "MESSAGE_B"]
```""",
    "transitions": """Answer with a JSON object inside a ```json code block. It has the current_state key, whose value
is an array of objects with the keys receive_message and next_state, e.g.
```json
{"STATE_A": [{"receive_message": "MESSAGE_A", "next_state": "STATE_B"}]}
```""",
}


INSTRUCTIONS = {
    "code_paths": "Find the source files that implement the protocol state machine.",
    "states": "Extract the protocol states that the implementation keeps track of.",
    "messages": "Extract the protocol message types that the implementation receives and handles.",
    "transitions": "Identify the state transitions the implementation performs in one given state.",
}


TEMPLATES = {
    "code_paths": Template(
        "The code below belongs to an implementation of the ${protocol} protocol.\n"
        "Which files contain the code of its state machine, i.e. where the current state is stored, "
        "compared and updated?\n\n"
        "${desired_format}"
    ),
    "states": Template(
        "The ${protocol} state machine is implemented in these files:\n${code_paths}\n\n"
        "List all states of the ${protocol} state machine as they are named in the code.\n\n"
        "${desired_format}"
    ),
    "messages": Template(
        "The ${protocol} state machine is implemented in these files:\n${code_paths}\n\n"
        "List all message types of ${protocol} that the state machine reacts to, as they are named in the code.\n\n"
        "${desired_format}"
    ),
    "transitions": Template(
        "The ${protocol} state machine is implemented in these files:\n${code_paths}\n\n"
        "Its states are:\n${states}\n\nIts message types are:\n${messages}\n\n"
        'The current_state is "${current_state}". For every message type that can be received in this state, '
        "give the state the implementation moves to.\n\n"
        "${desired_format}"
    ),
}


REQUIRED_SLOTS = {
    "code_paths": ("protocol", "desired_format"),
    "states": ("protocol", "code_paths", "desired_format"),
    "messages": ("protocol", "code_paths", "desired_format"),
    "transitions": ("protocol", "code_paths", "states", "messages", "current_state", "desired_format"),
}


GENERIC_BACKGROUND = (
    "${protocol} is a network protocol. Its implementations realize a protocol state machine: the implementation "
    "keeps the current state of a session, and each received message type moves the session to a next state. "
    "States are usually enumeration constants or variables named after the protocol phases, and the code that "
    "handles a message checks the current state before updating it."
)

BACKGROUNDS = {
    "ikev2": (
        "IKEv2 negotiates Security Associations (SAs) between two peers with the exchanges IKE_SA_INIT, IKE_AUTH, "
        "CREATE_CHILD_SA and INFORMATIONAL. The state of the IKE SA essentially represents the state of the peer, "
        "so implementations store the protocol state in their SA objects."
    ),
    "tls": (
        "TLS establishes a secure channel with a handshake in which client and server exchange messages such as "
        "ClientHello, ServerHello, Certificate, Finished. Implementations usually keep the handshake state in a "
        "connection object and dispatch on the handshake message type."
    ),
    "bgp": (
        "BGP-4 peers move through the states Idle, Connect, Active, OpenSent, OpenConfirm and Established while "
        "exchanging OPEN, UPDATE, NOTIFICATION and KEEPALIVE messages and reacting to timer events."
    ),
    "rtsp": (
        "RTSP controls media sessions with requests such as OPTIONS, DESCRIBE, SETUP, PLAY, PAUSE and TEARDOWN; "
        "a server tracks each session in states such as Init, Ready, Playing and Recording."
    ),
    "l2tp": (
        "L2TP sets up control connections with SCCRQ, SCCRP and SCCCN and sessions with ICRQ, ICRP, ICCN, OCRQ, "
        "OCRP and OCCN; StopCCN and CDN tear them down. Control connections and sessions each have a state machine."
    ),
}


def background_for(protocol: str) -> str:
    key = protocol_key(protocol)
    generic = Template(GENERIC_BACKGROUND).substitute(protocol=protocol)
    if key in BACKGROUNDS:
        return generic + "\n" + BACKGROUNDS[key]
    return generic


def format_list(items) -> str:
    items = list(items)
    if not items:
        return "(none)"
    return "\n".join(f"- {item}" for item in items)


@dataclass(frozen=True)
class PromptSpec:
    stage: str
    protocol: str
    slots: dict[str, str] = field(default_factory=dict)
    background: str = ""
    instruction: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")


def build_spec(stage: str, protocol: str, **slots) -> PromptSpec:
    """A PromptSpec with the shipped background, instruction and desired format; list slots are rendered as bullets."""
    filled = {"protocol": protocol, "desired_format": DESIRED_FORMATS.get(stage, "")}
    for name, value in slots.items():
        filled[name] = value if isinstance(value, str) else format_list(value)
    return PromptSpec(stage, protocol, filled, background_for(protocol), INSTRUCTIONS.get(stage, ""))


def render(spec: PromptSpec) -> str:
    slots = dict(spec.slots)
    slots.setdefault("protocol", spec.protocol)
    for name in REQUIRED_SLOTS[spec.stage]:
        if name not in slots:
            raise TemplateError(name)
    body = TEMPLATES[spec.stage].substitute(slots)
    return "\n\n".join(part for part in (spec.background, spec.instruction, body) if part)
