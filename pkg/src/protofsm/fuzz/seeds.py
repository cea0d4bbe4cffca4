"""Seed corpora for stateful fuzzers.

Message sequences cover every transition reachable from an initial state:
the shortest path to the transition's source followed by the transition
itself. Seed files are the raw concatenation of per-message payload templates.
"""

from __future__ import annotations

import logging
import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from protofsm.errors import ConfigError, InvalidFsm, TemplateMissing
from protofsm.model.fsm import FsmModel, Level, Transition, Violation, canonicalize_name, require_valid
from protofsm.model.utils import dumps_document, sha256_text


logger = logging.getLogger(__name__)

# ----- Settings -----

LENGTH_FIELDS = {b"{{LEN16}}": ">H", b"{{LEN32}}": ">I"}
MANIFEST_NAME = "manifest.json"

# -----------------------------------------


class CoverStrategy(str, Enum):
    TRANSITION = "transition-cover"


@dataclass(frozen=True)
class SeedSequence:
    messages: tuple[str, ...]
    path: tuple[str, ...]
    covered: frozenset[Transition]
    target: Transition

    @property
    def transitions(self) -> tuple[Transition, ...]:
        return tuple(Transition(*step) for step in zip(self.path, self.messages, self.path[1:]))


def shortest_paths(fsm: FsmModel) -> dict[str, tuple[Transition, ...]]:
    """Breadth-first tree from all initial states; the walk reaching each reachable state."""
    outgoing = fsm.outgoing()
    walks: dict[str, tuple[Transition, ...]] = {}
    queue = deque()
    for s in sorted(fsm.initial_states):
        walks[s] = ()
        queue.append(s)
    while queue:
        state = queue.popleft()
        for t in outgoing.get(state, []):
            if t.next_state not in walks:
                walks[t.next_state] = walks[state] + (t,)
                queue.append(t.next_state)
    return walks


def reachable_transitions(fsm: FsmModel) -> set[Transition]:
    reached = shortest_paths(fsm)
    return {t for t in fsm.transitions if t.current_state in reached}


def unreachable_transitions(fsm: FsmModel) -> list[Transition]:
    return sorted(fsm.transitions - reachable_transitions(fsm))


def generate_sequences(fsm: FsmModel, strategy: CoverStrategy | str = CoverStrategy.TRANSITION) -> list[SeedSequence]:
    strategy = CoverStrategy(strategy)
    if not fsm.initial_states:
        raise InvalidFsm([Violation("initial_states_empty", "initial_states empty")])
    require_valid(fsm, Level.LENIENT)

    walks = shortest_paths(fsm)
    for t in unreachable_transitions(fsm):
        logger.warning(f"transition {t} is unreachable from the initial states; no seed covers it")

    targets = sorted(
        (t for t in fsm.transitions if t.current_state in walks),
        key=lambda t: (len(walks[t.current_state]), t),
    )
    candidates = [(t, walks[t.current_state] + (t,)) for t in targets]
    prefixes = {walk[:i] for _, walk in candidates for i in range(1, len(walk))}

    sequences = []
    for target, walk in candidates:
        if walk in prefixes:
            continue
        sequences.append(
            SeedSequence(
                messages=tuple(t.receive_message for t in walk),
                path=(walk[0].current_state,) + tuple(t.next_state for t in walk),
                covered=frozenset(walk),
                target=target,
            )
        )
    return sequences


# payload templates


@dataclass(frozen=True)
class PayloadTemplateMap:
    entries: dict[str, bytes]

    def __getitem__(self, message: str) -> bytes:
        try:
            return self.entries[message]
        except KeyError:
            raise TemplateMissing(message) from None

    def missing(self, messages) -> list[str]:
        return sorted({m for m in messages if m not in self.entries})


def load_templates(directory: str | Path) -> PayloadTemplateMap:
    """One file per message type; the file stem (canonicalized) names the message."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"template directory {directory} does not exist")
    entries = {}
    for path in sorted(directory.iterdir()):
        if path.is_file() and not path.name.startswith("."):
            entries[canonicalize_name(path.stem)] = path.read_bytes()
    return PayloadTemplateMap(entries)


def render_payload(template: bytes) -> bytes:
    """Replace one length placeholder with the big-endian length of the whole rendered payload."""
    for token, fmt in LENGTH_FIELDS.items():
        if token in template:
            width = struct.calcsize(fmt)
            total = len(template) - len(token) + width
            return template.replace(token, struct.pack(fmt, total), 1)
    return template


def seed_name(index: int, seq: SeedSequence) -> str:
    return f"seq_{index:04d}_{sha256_text('>'.join(seq.path))[:8]}.raw"


def render_seeds(
    sequences: list[SeedSequence], templates: PayloadTemplateMap, out_dir: str | Path, parallelism: int = 4
) -> list[Path]:
    missing = templates.missing(m for seq in sequences for m in seq.messages)
    if missing:
        raise TemplateMissing(missing[0])

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def write(item):
        index, seq = item
        path = out_dir / seed_name(index, seq)
        path.write_bytes(b"".join(render_payload(templates[m]) for m in seq.messages))
        return path

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        files = list(pool.map(write, enumerate(sequences)))

    manifest = {
        "strategy": CoverStrategy.TRANSITION.value,
        "seeds": [
            {"file": path.name, "messages": list(seq.messages), "states": list(seq.path)}
            for path, seq in zip(files, sequences)
        ],
    }
    (out_dir / MANIFEST_NAME).write_text(dumps_document(manifest), encoding="utf-8")
    logger.info(f"wrote {len(files)} seeds to {out_dir}")
    return files
