from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from importlib.resources import files
from pathlib import Path
from typing import Callable, TypeVar

import openai


logger = logging.getLogger(__name__)

T = TypeVar("T")


# helpers


def silent(iterable, **kwargs):
    """Drop-in for tqdm when progress bars are off."""
    return iterable


def package_path(relative: str) -> Path:
    """Path of a file shipped inside the protofsm package, e.g. "configs/separators.yaml"."""
    return Path(str(files("protofsm").joinpath(relative)))


# digests and deterministic documents


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dumps_document(obj) -> str:
    """Serialize a structured document. Key order is kept as built; output ends with a newline."""
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def config_digest(obj) -> str:
    return sha256_text(json.dumps(obj, sort_keys=True, separators=(",", ":")))


def read_git_commit(repo_root: str | Path) -> str | None:
    """Resolve HEAD of a plain (non-worktree) checkout without shelling out to git."""
    git_dir = Path(repo_root) / ".git"
    head = git_dir / "HEAD"
    if not head.is_file():
        return None
    ref = head.read_text(encoding="utf-8").strip()
    if not ref.startswith("ref:"):
        return ref or None
    ref_path = git_dir / ref[4:].strip()
    if ref_path.is_file():
        return ref_path.read_text(encoding="utf-8").strip() or None
    packed = git_dir / "packed-refs"
    if packed.is_file():
        for line in packed.read_text(encoding="utf-8").splitlines():
            if line.endswith(" " + ref[4:].strip()):
                return line.split(" ", 1)[0]
    return None


# remote backends


def is_transient_api_error(e: Exception) -> bool:
    """Connection problems, rate limits and 5xx answers are worth retrying; auth and 4xx are not."""
    return isinstance(e, (openai.APIConnectionError, openai.RateLimitError, openai.InternalServerError))


class SessionLog:
    """Append-only JSON-lines audit log of backend requests; thread-safe."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()

    def write(self, record: dict):
        if self.path is None:
            return
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


# retries


def with_retries(
    call: Callable[[], T],
    attempts: int,
    base_delay: float,
    is_transient: Callable[[Exception], bool],
    sleep: Callable[[float], None] = time.sleep,
    what: str = "request",
) -> tuple[T, int]:
    """Run call with exponential backoff on transient failures; returns (result, attempts used).

    The last exception propagates with its attempt count attached as `attempts`.
    """
    for attempt in range(1, attempts + 1):
        try:
            return call(), attempt
        except Exception as e:
            if attempt >= attempts or not is_transient(e):
                e.attempts = attempt
                raise
            delay = base_delay * 2 ** (attempt - 1)
            logger.warning(f"{what} failed (attempt {attempt}/{attempts}): {e}; retrying in {delay:.1f}s")
            sleep(delay)
    raise AssertionError("unreachable")
