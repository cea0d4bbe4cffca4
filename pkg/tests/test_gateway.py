import json

import pytest
from conftest import FakeChatClient, api_error, connection_error, timeout_error

from protofsm.errors import BackendError, ChatTimeout, ConfigError, FixtureMiss
from protofsm.infer.gateway import ChatConfig, ChatGateway, FixtureBook, Transcript, Turn
from protofsm.model.utils import sha256_text


def book(*entries) -> FixtureBook:
    return FixtureBook.from_document({"entries": list(entries)})


def test_transcript_digest_of_single_prompt():
    assert Transcript.single("hello").digest() == sha256_text("hello")
    assert Transcript.single("hello", system="be terse").messages()[0] == {"role": "system", "content": "be terse"}


@pytest.mark.parametrize("turns", [(), (Turn("assistant", "hi"),), (Turn("user", "a"), Turn("tool", "b"))])
def test_transcript_validation(turns):
    with pytest.raises(ConfigError):
        Transcript(turns)


def test_fixture_digest_and_pattern_lookup():
    fixtures = book(
        {"key_kind": "digest", "key": sha256_text("exact prompt"), "responses": ["by digest"]},
        {"key_kind": "pattern", "key": "states", "responses": ["by pattern"], "repeat": True},
    )
    gateway = ChatGateway(backend="fixture", fixtures=fixtures)
    assert gateway.complete(Transcript.single("exact prompt")) == "by digest"
    assert gateway.complete(Transcript.single("list the states")) == "by pattern"
    assert gateway.complete(Transcript.single("list the states again")) == "by pattern"


def test_fixture_first_declared_entry_wins():
    fixtures = book(
        {"key_kind": "pattern", "key": "state", "responses": ["first"], "repeat": True},
        {"key_kind": "pattern", "key": "states", "responses": ["second"], "repeat": True},
    )
    assert fixtures.next_response(Transcript.single("all states")) == "first"


def test_fixture_responses_cycle_or_exhaust():
    fixtures = book(
        {"key_kind": "pattern", "key": "cycle", "responses": ["a", "b"], "repeat": True},
        {"key_kind": "pattern", "key": "once", "responses": ["x"]},
    )
    assert [fixtures.next_response(Transcript.single("cycle")) for _ in range(5)] == ["a", "b", "a", "b", "a"]
    assert fixtures.next_response(Transcript.single("once")) == "x"
    with pytest.raises(FixtureMiss):
        fixtures.next_response(Transcript.single("once"))


def test_fixture_miss():
    with pytest.raises(FixtureMiss):
        book({"key": "0" * 64, "responses": ["x"]}).next_response(Transcript.single("anything"))


def test_fixture_book_validation(tmp_path):
    with pytest.raises(ConfigError):
        book({"key": "k", "responses": []})
    with pytest.raises(ConfigError):
        book({"key": "k", "responses": ["x"], "weight": 2})
    with pytest.raises(ConfigError):
        FixtureBook.load(tmp_path / "missing.json")
    path = tmp_path / "fixtures.json"
    path.write_text(json.dumps([{"key_kind": "pattern", "key": "k", "responses": ["x"]}]), encoding="utf-8")
    assert FixtureBook.load(path).entries[0].responses == ("x",)


def test_gateway_backend_validation():
    with pytest.raises(ConfigError):
        ChatGateway(backend="local")
    with pytest.raises(ConfigError):
        ChatGateway(backend="fixture")


@pytest.mark.parametrize(
    "kwargs",
    [{"temperature": 3}, {"attempts": 0}, {"parallelism": 0}, {"max_output_tokens": 9000}, {"timeout": 0}],
)
def test_chat_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ChatConfig(**kwargs)


def test_remote_retries_transient_errors(no_sleep, tmp_path):
    record, delays = no_sleep
    client = FakeChatClient([connection_error(), connection_error(), "answer"])
    cfg = ChatConfig(base_delay=0.25, session_log=str(tmp_path / "session.jsonl"))
    gateway = ChatGateway(cfg, client=client, sleep=record)
    completion = gateway.complete_with_usage(Transcript.single("prompt"))
    assert completion.text == "answer"
    assert completion.attempts == 3
    assert (completion.prompt_tokens, completion.completion_tokens) == (11, 7)
    assert delays == [0.25, 0.5]
    assert client.calls[0]["messages"] == [{"role": "user", "content": "prompt"}]
    assert client.calls[0]["model"] == "gpt-4"

    (line,) = (tmp_path / "session.jsonl").read_text(encoding="utf-8").splitlines()
    entry = json.loads(line)
    assert entry["prompt_digest"] == sha256_text("prompt")
    assert entry["attempts"] == 3
    assert "response" not in entry


def test_session_log_can_record_content(no_sleep, tmp_path):
    record, _ = no_sleep
    cfg = ChatConfig(session_log=str(tmp_path / "session.jsonl"), log_content=True)
    ChatGateway(cfg, client=FakeChatClient(["answer"]), sleep=record).complete(Transcript.single("prompt"))
    entry = json.loads((tmp_path / "session.jsonl").read_text(encoding="utf-8"))
    assert entry["response"] == "answer"


def test_remote_gives_up_after_all_attempts(no_sleep):
    record, delays = no_sleep
    client = FakeChatClient([connection_error()])
    gateway = ChatGateway(ChatConfig(attempts=3, base_delay=1.0), client=client, sleep=record)
    with pytest.raises(BackendError) as excinfo:
        gateway.complete(Transcript.single("prompt"))
    assert excinfo.value.attempts == 3
    assert excinfo.value.retryable
    assert delays == [1.0, 2.0]


def test_remote_does_not_retry_permanent_errors(no_sleep):
    record, delays = no_sleep
    client = FakeChatClient([api_error()])
    with pytest.raises(BackendError) as excinfo:
        ChatGateway(client=client, sleep=record).complete(Transcript.single("prompt"))
    assert excinfo.value.attempts == 1
    assert not excinfo.value.retryable
    assert len(client.calls) == 1
    assert delays == []


def test_remote_timeout(no_sleep):
    record, _ = no_sleep
    gateway = ChatGateway(ChatConfig(attempts=2), client=FakeChatClient([timeout_error()]), sleep=record)
    with pytest.raises(ChatTimeout) as excinfo:
        gateway.complete(Transcript.single("prompt"))
    assert excinfo.value.attempts == 2
    assert isinstance(excinfo.value, TimeoutError)


def test_check_credentials(monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    with pytest.raises(BackendError):
        ChatGateway().check_credentials()
    ChatGateway(backend="fixture", fixtures=book({"key": "k", "responses": ["x"]})).check_credentials()
    ChatGateway(client=FakeChatClient(["x"])).check_credentials()
    monkeypatch.setenv("OPENAI_API_KEY", "sk-test")
    ChatGateway().check_credentials()
