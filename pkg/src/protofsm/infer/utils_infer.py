# A unified module for the inference process
# The CLI and the ProtocolFSM facade both go through infer_fsm; change the run report shape in one place
from __future__ import annotations

import json
import logging
import posixpath
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

from pydantic import BaseModel, ConfigDict, TypeAdapter, ValidationError
from tqdm import tqdm

from protofsm.augment.vector_store import Embedder, RetrievalResult, VectorIndex
from protofsm.errors import CanonicalNameError, ConfigError, InferenceFailed, ParseFailure, StageFailed
from protofsm.infer.gateway import ChatGateway, Completion, Transcript
from protofsm.infer.prompts import build_spec, render, PromptSpec
from protofsm.model.fsm import FsmModel, Implementation, Level, Transition, canonicalize_name, require_valid
from protofsm.model.utils import silent


logger = logging.getLogger(__name__)

# -----------------------------------------

consensus_iterations = 20
consensus_threshold = 0.8
retrieval_k = 8
chars_per_token = 4

# -----------------------------------------


@dataclass(frozen=True)
class ConsensusConfig:
    iterations: int = consensus_iterations
    threshold: float = consensus_threshold

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("consensus.iterations must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("consensus.threshold must lie strictly between 0 and 1")

    def keeps(self, count: int) -> bool:
        """Strict: kept iff count / iterations > threshold, computed exactly."""
        return Fraction(count, self.iterations) > Fraction(str(self.threshold))


@dataclass(frozen=True)
class RetrievalSettings:
    enabled: bool = True
    k: int = retrieval_k
    mode: str = "exact"
    nprobe: int = 2
    context_window: int = 8192
    max_output_tokens: int = 1024
    chars_per_token: int = chars_per_token

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("retrieval_k must be >= 1")

    def budget(self, prompt: str) -> int:
        """Characters of code context that fit next to the prompt and the output budget."""
        return max(0, (self.context_window - self.max_output_tokens) * self.chars_per_token - len(prompt))


@dataclass(frozen=True, order=True)
class StateItem:
    role: str  # state | initial | final
    name: str

    def __str__(self):
        return self.name if self.role == "state" else f"{self.role}:{self.name}"


# parse model output

_FENCE = re.compile(r"```[A-Za-z]*[ \t]*\n(.*?)```", re.DOTALL)


def extract_block(response: str):
    """The first JSON value in a fenced code block, else the first bare JSON array or object."""
    for m in _FENCE.finditer(response):
        try:
            return json.loads(m.group(1))
        except json.JSONDecodeError:
            continue
    decoder = json.JSONDecoder()
    for i, ch in enumerate(response):
        if ch in "[{":
            try:
                value, _ = decoder.raw_decode(response, i)
                return value
            except json.JSONDecodeError:
                continue
    raise ParseFailure("no JSON block in response")


class StatesAnswer(BaseModel):
    model_config = ConfigDict(extra="ignore")

    states: list[str]
    initial_states: list[str] = []
    final_states: list[str] = []


class MessagesAnswer(BaseModel):
    model_config = ConfigDict(extra="ignore")

    messages: list[str]


class EdgeAnswer(BaseModel):
    model_config = ConfigDict(extra="ignore")

    receive_message: str
    next_state: str


_names = TypeAdapter(list[str])
_transitions = TypeAdapter(dict[str, list[EdgeAnswer]])


def normalize_path(path: str) -> str:
    path = posixpath.normpath(path.strip().replace("\\", "/"))
    while path.startswith("./"):
        path = path[2:]
    return path.lstrip("/")


def parse_output(stage: str, response: str) -> list:
    """Canonical items of one response, deduplicated and sorted."""
    block = extract_block(response)
    try:
        if stage == "code_paths":
            items = {normalize_path(p) for p in _names.validate_python(block) if p.strip()}
        elif stage == "states":
            if isinstance(block, list):
                block = {"states": block}
            answer = StatesAnswer.model_validate(block)
            items = {StateItem("state", canonicalize_name(s)) for s in answer.states}
            items |= {StateItem("initial", canonicalize_name(s)) for s in answer.initial_states}
            items |= {StateItem("final", canonicalize_name(s)) for s in answer.final_states}
        elif stage == "messages":
            if isinstance(block, dict):
                block = MessagesAnswer.model_validate(block).messages
            items = {canonicalize_name(m) for m in _names.validate_python(block)}
        elif stage == "transitions":
            items = {
                Transition(current, edge.receive_message, edge.next_state).canonical()
                for current, edges in _transitions.validate_python(block).items()
                for edge in edges
            }
        else:
            raise ConfigError(f"unknown stage {stage!r}")
    except ValidationError as e:
        raise ParseFailure(f"{stage} answer has the wrong shape: {e.error_count()} problems") from e
    except CanonicalNameError as e:
        raise ParseFailure(str(e)) from e
    return sorted(items)


# consensus


def vote(parsed: list[list | None], cc: ConsensusConfig) -> tuple[dict, dict]:
    """Split items into (kept, dropped) frequency maps. A failed parse (None) votes for nothing."""
    counts = Counter(item for items in parsed if items is not None for item in set(items))
    kept, dropped = {}, {}
    for item in sorted(counts):
        (kept if cc.keeps(counts[item]) else dropped)[item] = counts[item]
    return kept, dropped


@dataclass
class StageResult:
    stage: str
    raw_responses: list[str]
    parsed_items: list
    kept_items: dict
    dropped_items: dict
    parse_failures: int = 0
    prompt_digest: str = ""
    context: list[str] = field(default_factory=list)
    prompt_tokens: int = 0
    completion_tokens: int = 0
    current_state: str | None = None
    elapsed_s: float = 0.0

    @property
    def kept(self) -> list:
        return sorted(self.kept_items)

    def to_report(self, iterations: int) -> dict:
        report = {"stage": self.stage}
        if self.current_state is not None:
            report["current_state"] = self.current_state
        report.update(
            {
                "prompt_digest": self.prompt_digest,
                "iterations": iterations,
                "parse_failures": self.parse_failures,
                "context": self.context,
                "kept": {str(k): v for k, v in self.kept_items.items()},
                "dropped": {str(k): v for k, v in self.dropped_items.items()},
                "tokens": {"prompt": self.prompt_tokens, "completion": self.completion_tokens},
                "elapsed_s": self.elapsed_s,
            }
        )
        return report


# retrieval


def retrieve_context(
    stage: str,
    query_text: str,
    index: VectorIndex | None,
    k: int = retrieval_k,
    embedder: Embedder | None = None,
    budget_chars: int | None = None,
    mode: str = "exact",
    nprobe: int = 2,
) -> list[RetrievalResult]:
    """Top-k chunks for the query, trimmed from the lowest score up until the rendered context fits budget_chars."""
    if index is None or len(index) == 0:
        logger.warning(f"{stage}: retrieval index is empty, prompting without code context")
        return []
    embedder = embedder or Embedder()
    index.check_backend(embedder.spec)
    query = embedder.embed([query_text], progress=silent)[0]
    results = index.top_k(query, k, mode=mode, nprobe=nprobe)
    if budget_chars is not None:
        while results and context_size(results) > budget_chars:
            results.pop()
    return results


CONTEXT_HEADER = "\n\nRelevant code from the implementation:\n\n"


def context_block(r: RetrievalResult) -> str:
    return f"File: {r.chunk.doc_path} (part {r.chunk.ordinal})\n```\n{r.chunk.text}\n```"


def context_size(context: list[RetrievalResult]) -> int:
    """Characters compose_prompt adds to a prompt for this context."""
    return len(compose_prompt("", context))


def compose_prompt(prompt: str, context: list[RetrievalResult]) -> str:
    if not context:
        return prompt
    return prompt + CONTEXT_HEADER + "\n\n".join(context_block(r) for r in context)


# run one stage


def run_stage(
    stage: str,
    spec: PromptSpec,
    index: VectorIndex | None,
    gateway: ChatGateway,
    cc: ConsensusConfig,
    embedder: Embedder | None = None,
    retrieval: RetrievalSettings | None = None,
    progress=tqdm,
) -> StageResult:
    started = time.monotonic()
    retrieval = retrieval or RetrievalSettings(enabled=index is not None)
    prompt = render(spec)
    context = []
    if retrieval.enabled:
        context = retrieve_context(
            stage, prompt, index, retrieval.k, embedder, retrieval.budget(prompt), retrieval.mode, retrieval.nprobe
        )
    transcript = Transcript.single(compose_prompt(prompt, context))

    with ThreadPoolExecutor(max_workers=gateway.parallelism) as pool:
        calls = pool.map(lambda _: gateway.complete_with_usage(transcript), range(cc.iterations))
        label = stage if spec.slots.get("current_state") is None else f"{stage} {spec.slots['current_state']}"
        completions: list[Completion] = list(progress(calls, total=cc.iterations, desc=label, disable=None))

    raw = [c.text for c in completions]
    parsed: list[list | None] = []
    for response in raw:
        try:
            parsed.append(parse_output(stage, response))
        except ParseFailure as e:
            logger.debug(f"{stage}: unparseable response ({e})")
            parsed.append(None)
    failures = sum(1 for p in parsed if p is None)
    if failures == len(parsed):
        raise StageFailed(stage, f"none of {len(raw)} responses could be parsed", raw)

    kept, dropped = vote(parsed, cc)
    return StageResult(
        stage=stage,
        raw_responses=raw,
        parsed_items=sorted({item for items in parsed if items for item in items}),
        kept_items=kept,
        dropped_items=dropped,
        parse_failures=failures,
        prompt_digest=transcript.digest(),
        context=[r.chunk.ref for r in context],
        prompt_tokens=sum(c.prompt_tokens or 0 for c in completions),
        completion_tokens=sum(c.completion_tokens or 0 for c in completions),
        current_state=spec.slots.get("current_state"),
        elapsed_s=round(time.monotonic() - started, 3),
    )


# whole pipeline


def initial_states_without_incoming(states: set[str], transitions: set[Transition]) -> set[str]:
    entered = {t.next_state for t in transitions if t.current_state != t.next_state}
    return {s for s in states if s not in entered}


def infer_fsm(
    protocol: str,
    index: VectorIndex | None,
    gateway: ChatGateway,
    cc: ConsensusConfig | None = None,
    embedder: Embedder | None = None,
    retrieval: RetrievalSettings | None = None,
    implementation: Implementation | None = None,
    show_info=logger.info,
    progress=tqdm,
) -> tuple[FsmModel, dict]:
    """code_paths -> states -> messages -> transitions for every kept state.

    Returns the FSM and the run report; a failing stage raises InferenceFailed
    carrying the report so far.
    """
    cc = cc or ConsensusConfig()
    report = {
        "protocol": protocol,
        "iterations": cc.iterations,
        "threshold": cc.threshold,
        "retrieval": retrieval is None or retrieval.enabled,
        "stages": [],
    }
    started = time.monotonic()

    def stage(name: str, **slots) -> StageResult:
        spec = build_spec(name, protocol, **slots)
        try:
            result = run_stage(name, spec, index, gateway, cc, embedder, retrieval, progress)
        except StageFailed as e:
            report["elapsed_s"] = round(time.monotonic() - started, 3)
            raise InferenceFailed(e, report) from e
        report["stages"].append(result.to_report(cc.iterations))
        return result

    show_info(f"Inferring the {protocol} state machine ({cc.iterations} dialogues per stage)")
    code_paths = stage("code_paths").kept
    if not code_paths:
        logger.warning("code_paths: no path survived consensus")

    states_result = stage("states", code_paths=code_paths)
    states = {i.name for i in states_result.kept if i.role == "state"}
    if not states:
        raise InferenceFailed(StageFailed("states", "no state survived consensus", states_result.raw_responses), report)
    initial_marked = {i.name for i in states_result.kept if i.role == "initial"} & states
    final_marked = {i.name for i in states_result.kept if i.role == "final"} & states

    messages_result = stage("messages", code_paths=code_paths)
    messages = set(messages_result.kept)
    if not messages:
        raise InferenceFailed(
            StageFailed("messages", "no message type survived consensus", messages_result.raw_responses), report
        )

    show_info(f"Kept {len(states)} states and {len(messages)} message types; querying transitions per state")
    transitions: set[Transition] = set()
    for current in sorted(states):
        result = stage(
            "transitions",
            code_paths=code_paths,
            states=sorted(states),
            messages=sorted(messages),
            current_state=current,
        )
        transitions.update(result.kept)

    kept_transitions, dropped = set(), []
    for t in sorted(transitions):
        if t.current_state in states and t.next_state in states and t.receive_message in messages:
            kept_transitions.add(t)
        else:
            logger.warning(f"dropping transition {t}: it references a state or message that was not kept")
            dropped.append(str(t))
    report["dropped_transitions"] = dropped

    if initial_marked:
        initial, initial_source = initial_marked, "model"
    else:
        initial = initial_states_without_incoming(states, kept_transitions) or {sorted(states)[0]}
        initial_source = "heuristic"
        logger.warning(f"initial states chosen heuristically: {', '.join(sorted(initial))}")
    final_source = "model" if final_marked else "heuristic"
    if not final_marked:
        logger.warning("no final states marked by the model; leaving them empty")
    report["initial_states"] = {"source": initial_source, "states": sorted(initial)}
    report["final_states"] = {"source": final_source, "states": sorted(final_marked)}

    fsm = FsmModel(
        protocol=protocol,
        implementation=implementation or Implementation(),
        alphabet=frozenset(messages),
        states=frozenset(states),
        initial_states=frozenset(initial),
        final_states=frozenset(final_marked),
        transitions=frozenset(kept_transitions),
    )
    require_valid(fsm, Level.LENIENT)
    report["implementation"] = {"repo": fsm.implementation.repo, "commit": fsm.implementation.commit}
    report["tokens"] = {
        "prompt": sum(s["tokens"]["prompt"] for s in report["stages"]),
        "completion": sum(s["tokens"]["completion"] for s in report["stages"]),
    }
    report["summary"] = {"states": len(fsm.states), "transitions": len(fsm.transitions)}
    report["elapsed_s"] = round(time.monotonic() - started, 3)
    show_info(f"Inferred {len(fsm.states)} states and {len(fsm.transitions)} transitions")
    return fsm, report
