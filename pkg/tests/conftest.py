from __future__ import annotations

import random
from pathlib import Path
from types import SimpleNamespace

import httpx
import openai
import pytest

from protofsm.model.fsm import FsmModel, Implementation, Transition
from protofsm.model.utils import package_path


def make_fsm(
    transitions,
    initial=("A",),
    final=(),
    states=None,
    alphabet=None,
    protocol="test",
    implementation=None,
) -> FsmModel:
    """Small FSM from (source, message, destination) triples; states and alphabet default to what they use."""
    transitions = [Transition(*t) for t in transitions]
    if states is None:
        states = {t.current_state for t in transitions} | {t.next_state for t in transitions}
        states |= set(initial) | set(final)
    if alphabet is None:
        alphabet = {t.receive_message for t in transitions} or {"M"}
    return FsmModel.build(protocol, states, alphabet, transitions, initial, final, implementation or Implementation())


def random_fsm(rng: random.Random, max_states: int = 5, messages=("A", "B"), density: float = 0.3) -> FsmModel:
    n = rng.randint(1, max_states)
    states = [f"S{i}" for i in range(n)]
    transitions = [
        (s, m, t) for s in states for m in messages for t in states if rng.random() < density
    ]
    initial = rng.sample(states, rng.randint(1, min(2, n)))
    final = rng.sample(states, rng.randint(1, n))
    return make_fsm(transitions, initial, final, states=states, alphabet=messages)


def write_repo(root: Path, files: dict[str, str | bytes]) -> Path:
    for rel, content in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content, encoding="utf-8")
    return root


def fenced(payload: str) -> str:
    return f"Here you go.\n```json\n{payload}\n```"


# stand-ins for the openai client


def connection_error() -> openai.APIConnectionError:
    return openai.APIConnectionError(request=httpx.Request("POST", "https://api.invalid/v1"))


def timeout_error() -> openai.APITimeoutError:
    return openai.APITimeoutError(request=httpx.Request("POST", "https://api.invalid/v1"))


def api_error(message: str = "bad request") -> openai.APIError:
    return openai.APIError(message, httpx.Request("POST", "https://api.invalid/v1"), body=None)


class FakeChatClient:
    """Answers chat.completions.create from a list of replies; an Exception reply is raised instead."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = []
        self.chat = SimpleNamespace(completions=SimpleNamespace(create=self.create))

    def create(self, **kwargs):
        self.calls.append(kwargs)
        reply = self.replies[min(len(self.calls), len(self.replies)) - 1]
        if isinstance(reply, Exception):
            raise reply
        message = SimpleNamespace(content=reply)
        usage = SimpleNamespace(prompt_tokens=11, completion_tokens=7)
        return SimpleNamespace(choices=[SimpleNamespace(message=message)], usage=usage)


class FakeEmbeddingClient:
    """Deterministic embeddings: one-hot on the text length modulo dim."""

    def __init__(self, dim: int, fail_first: list[Exception] | None = None):
        self.dim = dim
        self.failures = list(fail_first or [])
        self.calls = []
        self.embeddings = SimpleNamespace(create=self.create)

    def create(self, model, input):
        self.calls.append(list(input))
        if self.failures:
            raise self.failures.pop(0)
        data = []
        for i, text in enumerate(input):
            vector = [0.0] * self.dim
            vector[len(text) % self.dim] = 1.0
            data.append(SimpleNamespace(index=i, embedding=vector))
        return SimpleNamespace(data=data, usage=SimpleNamespace(total_tokens=len(input)))


@pytest.fixture
def data_dir() -> Path:
    return package_path("data")


@pytest.fixture
def toy_dir() -> Path:
    return package_path("infer/examples/toy")


@pytest.fixture
def no_sleep():
    delays = []
    return delays.append, delays


@pytest.fixture
def linear_fsm() -> FsmModel:
    return make_fsm([("A", "M1", "B"), ("B", "M2", "C")], initial=["A"], final=["C"], protocol="linear")
