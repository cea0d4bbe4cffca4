"""Chat-completion boundary: an OpenAI-compatible remote backend and a canned fixture backend."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import openai
from openai import OpenAI
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from protofsm.errors import BackendError, ChatTimeout, ConfigError, FixtureMiss
from protofsm.model.utils import SessionLog, is_transient_api_error, sha256_text, with_retries


logger = logging.getLogger(__name__)

# ----- Settings -----

MODEL = "gpt-4"
TEMPERATURE = 0.2
MAX_OUTPUT_TOKENS = 1024
CONTEXT_WINDOW = 8192
TIMEOUT = 120.0
ATTEMPTS = 5
BASE_DELAY = 1.0
PARALLELISM = 4

ROLES = ("system", "user", "assistant")
BACKENDS = ("remote", "fixture")

# -----------------------------------------


@dataclass(frozen=True)
class ChatConfig:
    model: str = MODEL
    temperature: float = TEMPERATURE
    max_output_tokens: int = MAX_OUTPUT_TOKENS
    endpoint: str | None = None
    credential_env: str = "OPENAI_API_KEY"
    timeout: float = TIMEOUT
    attempts: int = ATTEMPTS
    base_delay: float = BASE_DELAY
    parallelism: int = PARALLELISM
    context_window: int = CONTEXT_WINDOW
    session_log: str | None = None
    log_content: bool = False

    def __post_init__(self):
        if not 0 <= self.temperature <= 2:
            raise ConfigError("chat.temperature must be within [0, 2]")
        if self.attempts < 1:
            raise ConfigError("chat.attempts must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("chat.parallelism must be >= 1")
        if self.max_output_tokens < 1 or self.context_window <= self.max_output_tokens:
            raise ConfigError("chat.max_output_tokens must be >= 1 and below chat.context_window")
        if self.timeout <= 0:
            raise ConfigError("chat.timeout must be > 0")


@dataclass(frozen=True)
class Turn:
    role: str
    content: str


@dataclass(frozen=True)
class Transcript:
    turns: tuple[Turn, ...]

    def __post_init__(self):
        if not self.turns:
            raise ConfigError("a transcript needs at least one turn")
        if self.turns[0].role not in ("system", "user"):
            raise ConfigError("a transcript starts with a system or user turn")
        for t in self.turns:
            if t.role not in ROLES:
                raise ConfigError(f"unknown role {t.role!r}")

    @classmethod
    def single(cls, prompt: str, system: str | None = None) -> Transcript:
        turns = [Turn("system", system)] if system else []
        return cls(tuple(turns + [Turn("user", prompt)]))

    def messages(self) -> list[dict]:
        return [{"role": t.role, "content": t.content} for t in self.turns]

    def text(self) -> str:
        return "\n\n".join(t.content for t in self.turns)

    def digest(self) -> str:
        """sha256 of the rendered prompt; for a single user turn this is sha256(prompt)."""
        return sha256_text(self.text())


# fixture backend


class FixtureEntryDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    key_kind: Literal["digest", "pattern"] = "digest"
    key: str
    responses: list[str] = Field(min_length=1)
    repeat: bool = False


class FixtureBookDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    entries: list[FixtureEntryDoc]


@dataclass
class FixtureEntry:
    key_kind: str
    key: str
    responses: tuple[str, ...]
    repeat: bool = False
    cursor: int = 0

    def matches(self, transcript: Transcript, digest: str) -> bool:
        if self.key_kind == "digest":
            return self.key == digest
        return self.key in transcript.text()


@dataclass
class FixtureBook:
    """Canned responses; the first entry in declaration order whose key matches answers the call."""

    entries: list[FixtureEntry]
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @classmethod
    def from_document(cls, data) -> FixtureBook:
        if isinstance(data, list):
            data = {"entries": data}
        try:
            doc = FixtureBookDoc.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid fixture book: {e}") from e
        return cls([FixtureEntry(e.key_kind, e.key, tuple(e.responses), e.repeat) for e in doc.entries])

    @classmethod
    def load(cls, path: str | Path) -> FixtureBook:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read fixture book {path}: {e}") from e
        return cls.from_document(data)

    def next_response(self, transcript: Transcript) -> str:
        digest = transcript.digest()
        with self._lock:
            for entry in self.entries:
                if not entry.matches(transcript, digest):
                    continue
                if entry.cursor >= len(entry.responses):
                    if not entry.repeat:
                        raise FixtureMiss(
                            f"fixture entry {entry.key_kind}:{entry.key[:40]!r} exhausted after "
                            f"{len(entry.responses)} responses"
                        )
                    entry.cursor = 0
                response = entry.responses[entry.cursor]
                entry.cursor += 1
                return response
        raise FixtureMiss(f"no fixture entry matches prompt {digest[:12]}")


# gateway


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    latency_s: float = 0.0
    attempts: int = 1


class ChatGateway:
    def __init__(
        self,
        cfg: ChatConfig | None = None,
        backend: str = "remote",
        fixtures: FixtureBook | None = None,
        client: OpenAI | None = None,
        sleep=time.sleep,
    ):
        if backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {backend!r}")
        if backend == "fixture" and fixtures is None:
            raise ConfigError("the fixture backend needs a fixture book")
        self.cfg = cfg or ChatConfig()
        self.backend = backend
        self.fixtures = fixtures
        self._client = client
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(self.cfg.parallelism)
        self._session = SessionLog(self.cfg.session_log)

    @property
    def parallelism(self) -> int:
        return self.cfg.parallelism

    def check_credentials(self):
        """Fail before any network I/O when the remote backend has no credential."""
        if self.backend == "remote" and self._client is None and not os.environ.get(self.cfg.credential_env):
            raise BackendError(f"credential variable {self.cfg.credential_env} is not set")

    @property
    def client(self) -> OpenAI:
        if self._client is None:
            self.check_credentials()
            self._client = OpenAI(
                api_key=os.environ[self.cfg.credential_env],
                base_url=self.cfg.endpoint,
                timeout=self.cfg.timeout,
                max_retries=0,
            )
        return self._client

    def complete(self, transcript: Transcript) -> str:
        return self.complete_with_usage(transcript).text

    def complete_with_usage(self, transcript: Transcript) -> Completion:
        start = time.monotonic()
        if self.backend == "fixture":
            completion = Completion(self.fixtures.next_response(transcript))
        else:
            with self._slots:
                completion = self._remote(transcript)
        completion = Completion(
            completion.text,
            completion.prompt_tokens,
            completion.completion_tokens,
            round(time.monotonic() - start, 3),
            completion.attempts,
        )
        self._log(transcript, completion)
        return completion

    def _remote(self, transcript: Transcript) -> Completion:
        client = self.client
        cfg = self.cfg

        def call():
            return client.chat.completions.create(
                model=cfg.model,
                temperature=cfg.temperature,
                max_tokens=cfg.max_output_tokens,
                messages=transcript.messages(),
            )

        try:
            response, attempts = with_retries(
                call,
                attempts=cfg.attempts,
                base_delay=cfg.base_delay,
                is_transient=is_transient_api_error,
                sleep=self._sleep,
                what="chat request",
            )
        except openai.APITimeoutError as e:
            raise ChatTimeout(
                f"chat request timed out after {cfg.timeout}s",
                attempts=getattr(e, "attempts", cfg.attempts),
                retryable=True,
            ) from e
        except openai.OpenAIError as e:
            raise BackendError(
                f"chat request failed: {e}",
                attempts=getattr(e, "attempts", cfg.attempts),
                retryable=is_transient_api_error(e),
            ) from e

        usage = getattr(response, "usage", None)
        return Completion(
            response.choices[0].message.content or "",
            getattr(usage, "prompt_tokens", None),
            getattr(usage, "completion_tokens", None),
            attempts=attempts,
        )

    def _log(self, transcript: Transcript, completion: Completion):
        record = {
            "kind": "chat",
            "backend": self.backend,
            "model": self.cfg.model,
            "prompt_digest": transcript.digest(),
            "prompt_tokens": completion.prompt_tokens,
            "completion_tokens": completion.completion_tokens,
            "latency_s": completion.latency_s,
            "attempts": completion.attempts,
        }
        if self.cfg.log_content:
            record["messages"] = transcript.messages()
            record["response"] = completion.text
        self._session.write(record)
