"""Embeddings and the on-disk vector index.

Index file layout:
    b"FSMFIDX1" | u64 little-endian header length | header (UTF-8 JSON) | count x dim little-endian float32
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from openai import OpenAI
from tqdm import tqdm

from protofsm.augment.segmenter import Chunk
from protofsm.errors import BackendError, BackendMismatch, ConfigError, DimError, IndexFormatError
from protofsm.model.utils import SessionLog, is_transient_api_error, with_retries


logger = logging.getLogger(__name__)

# ----- Settings -----

MAGIC = b"FSMFIDX1"
FORMAT_VERSION = 1
DIM = 512
NGRAM = 3
BATCH_SIZE = 64
ATTEMPTS = 5
BASE_DELAY = 1.0
PARALLELISM = 4
NORM_TOLERANCE = 1e-6

# -----------------------------------------


@dataclass(frozen=True)
class BackendFingerprint:
    kind: str
    ident: str  # model id for remote, hash parameters for local-hash
    dim: int

    def to_document(self) -> dict:
        return {"kind": self.kind, "ident": self.ident, "dim": self.dim}


@dataclass(frozen=True)
class EmbeddingBackendSpec:
    kind: str = "local-hash"
    dim: int = DIM
    # remote
    model: str = "text-embedding-3-small"
    endpoint: str | None = None
    credential_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    batch_size: int = BATCH_SIZE
    attempts: int = ATTEMPTS
    base_delay: float = BASE_DELAY
    parallelism: int = PARALLELISM
    session_log: str | None = None
    # local-hash
    ngram: int = NGRAM
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("remote", "local-hash"):
            raise ConfigError(f"embedding.kind must be remote or local-hash, got {self.kind!r}")
        if self.dim <= 0:
            raise ConfigError("embedding.dim must be > 0")
        if self.ngram <= 0:
            raise ConfigError("embedding.ngram must be > 0")
        if self.batch_size <= 0 or self.attempts < 1 or self.parallelism < 1:
            raise ConfigError("embedding.batch_size, attempts and parallelism must be positive")

    def fingerprint(self) -> BackendFingerprint:
        if self.kind == "remote":
            return BackendFingerprint(self.kind, self.model, self.dim)
        return BackendFingerprint(self.kind, f"ngram={self.ngram};seed={self.seed}", self.dim)


# local-hash backend


def hash_bucket(gram: str, dim: int, seed: int = 0) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=str(seed).encode("ascii")).digest()
    return int.from_bytes(digest, "little") % dim


def char_ngrams(text: str, n: int) -> list[str]:
    if len(text) <= n:
        return [text]
    return [text[i : i + n] for i in range(len(text) - n + 1)]


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(v)):
        raise BackendError("embedding is zero or not finite")
    return (v / norm).astype(np.float32)


def hash_embed(text: str, dim: int, ngram: int = NGRAM, seed: int = 0) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float64)
    for gram, count in Counter(char_ngrams(text, ngram)).items():
        v[hash_bucket(gram, dim, seed)] += count
    return normalize(v)


# remote backend


def _openai_client(spec: EmbeddingBackendSpec) -> OpenAI:
    api_key = os.environ.get(spec.credential_env)
    if not api_key:
        raise BackendError(f"credential variable {spec.credential_env} is not set")
    return OpenAI(api_key=api_key, base_url=spec.endpoint, timeout=spec.timeout, max_retries=0)


class Embedder:
    def __init__(self, spec: EmbeddingBackendSpec | None = None, client: OpenAI | None = None, sleep=time.sleep):
        self.spec = spec or EmbeddingBackendSpec()
        self._client = client
        self._sleep = sleep
        self._session = SessionLog(self.spec.session_log)

    @property
    def client(self) -> OpenAI:
        if self._client is None:
            self._client = _openai_client(self.spec)
        return self._client

    def embed(self, texts: list[str], progress=tqdm) -> np.ndarray:
        """One unit vector per text, order-preserving, as an (n, dim) float32 matrix."""
        spec = self.spec
        if not texts:
            return np.zeros((0, spec.dim), dtype=np.float32)
        if spec.kind == "local-hash":
            texts = progress(texts, desc="Embedding", disable=None)
            return np.stack([hash_embed(t, spec.dim, spec.ngram, spec.seed) for t in texts])

        client = self.client
        batches = [texts[i : i + spec.batch_size] for i in range(0, len(texts), spec.batch_size)]
        with ThreadPoolExecutor(max_workers=spec.parallelism) as pool:
            results = pool.map(lambda b: self._embed_batch(client, b), batches)
            rows = [m for m in progress(results, total=len(batches), desc="Embedding", disable=None)]
        return np.concatenate(rows)

    def _embed_batch(self, client: OpenAI, batch: list[str]) -> np.ndarray:
        spec = self.spec
        start = time.monotonic()
        try:
            response, attempts = with_retries(
                lambda: client.embeddings.create(model=spec.model, input=batch),
                attempts=spec.attempts,
                base_delay=spec.base_delay,
                is_transient=is_transient_api_error,
                sleep=self._sleep,
                what="embedding request",
            )
        except Exception as e:
            raise BackendError(
                f"embedding request failed: {e}",
                attempts=getattr(e, "attempts", spec.attempts),
                retryable=is_transient_api_error(e),
            ) from e

        data = sorted(response.data, key=lambda d: d.index)
        if len(data) != len(batch):
            raise BackendError(f"embedding backend returned {len(data)} vectors for {len(batch)} texts", attempts)
        matrix = np.asarray([d.embedding for d in data], dtype=np.float64)
        if matrix.shape[1] != spec.dim:
            raise BackendError(f"embedding backend returned dim {matrix.shape[1]}, configured {spec.dim}", attempts)
        self._session.write(
            {
                "kind": "embeddings",
                "model": spec.model,
                "inputs": len(batch),
                "tokens": getattr(getattr(response, "usage", None), "total_tokens", None),
                "latency_s": round(time.monotonic() - start, 3),
                "attempts": attempts,
            }
        )
        return normalize(matrix)


def embed(texts: list[str], spec: EmbeddingBackendSpec, progress=tqdm) -> list[np.ndarray]:
    return list(Embedder(spec).embed(texts, progress=progress))


# index


@dataclass(frozen=True)
class RetrievalResult:
    chunk: Chunk
    score: float
    position: int


class VectorIndex:
    def __init__(
        self, fingerprint: BackendFingerprint, chunks: list[Chunk], vectors: np.ndarray, manifest: dict | None = None
    ):
        vectors = np.asarray(vectors, dtype=np.float32).reshape(len(chunks), fingerprint.dim)
        refs = [c.ref for c in chunks]
        if len(set(refs)) != len(refs):
            raise IndexFormatError("chunk references in an index must be unique")
        self.fingerprint = fingerprint
        self.chunks = list(chunks)
        self.vectors = vectors
        self.manifest = dict(manifest or {})
        self._ivf = None
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.fingerprint.dim

    def __len__(self):
        return len(self.chunks)

    def __eq__(self, other):
        if not isinstance(other, VectorIndex):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and self.chunks == other.chunks
            and self.manifest == other.manifest
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    def check_backend(self, spec: EmbeddingBackendSpec):
        expected = spec.fingerprint()
        if expected != self.fingerprint:
            raise BackendMismatch(
                f"index was built with {self.fingerprint.to_document()}, configured backend is {expected.to_document()}"
            )

    def scores(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=np.float64).ravel()
        if query.shape[0] != self.dim:
            raise DimError(f"query has dim {query.shape[0]}, index has dim {self.dim}")
        norm = np.linalg.norm(query)
        if norm == 0:
            raise DimError("query vector is zero")
        return self.vectors.astype(np.float64) @ (query / norm)

    def top_k(self, query: np.ndarray, k: int, mode: str = "exact", nprobe: int = 2) -> list[RetrievalResult]:
        """Results by descending cosine score, ties in index order."""
        if k < 1:
            raise ValueError("k must be >= 1")
        scores = self.scores(query)
        if not len(self.chunks):
            return []
        if mode == "exact":
            candidates = np.arange(len(self.chunks))
        elif mode == "ivf":
            candidates = self._ivf_candidates(np.asarray(query, dtype=np.float64).ravel(), nprobe)
        else:
            raise ConfigError(f"unknown retrieval mode {mode!r}")
        sub = scores[candidates]
        order = candidates[np.lexsort((candidates, -sub))][:k]
        return [RetrievalResult(self.chunks[i], float(scores[i]), int(i)) for i in order]

    # inverted-file approximate search

    def _ivf_candidates(self, query: np.ndarray, nprobe: int) -> np.ndarray:
        centroids, assignment = self.ivf()
        nearest = np.lexsort((np.arange(len(centroids)), -(centroids @ query)))[: max(1, nprobe)]
        return np.flatnonzero(np.isin(assignment, nearest))

    def ivf(self, iterations: int = 10):
        """Spherical k-means with evenly spaced initial centroids, so the clustering is deterministic."""
        with self._lock:
            if self._ivf is None:
                vectors = self.vectors.astype(np.float64)
                nlist = max(1, int(np.sqrt(len(vectors))))
                centroids = vectors[np.linspace(0, len(vectors) - 1, nlist).astype(int)]
                assignment = np.zeros(len(vectors), dtype=int)
                for _ in range(iterations):
                    assignment = np.argmax(vectors @ centroids.T, axis=1)
                    for c in range(nlist):
                        members = vectors[assignment == c]
                        if len(members):
                            mean = members.sum(axis=0)
                            norm = np.linalg.norm(mean)
                            if norm > 0:
                                centroids[c] = mean / norm
                assignment = np.argmax(vectors @ centroids.T, axis=1)
                self._ivf = (centroids, assignment)
            return self._ivf

    # persistence

    def header(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "fingerprint": self.fingerprint.to_document(),
            "count": len(self.chunks),
            "manifest": self.manifest,
            "chunks": [
                {
                    "doc_path": c.doc_path,
                    "ordinal": c.ordinal,
                    "start": c.start,
                    "end": c.end,
                    "overlap_len": c.overlap_len,
                    "text": c.text,
                }
                for c in self.chunks
            ],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = json.dumps(self.header(), ensure_ascii=False, separators=(",", ":")).encode("utf-8")
        records = self.vectors.astype("<f4").tobytes()
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            f.write(records)
        os.replace(tmp, path)
        return path


def load(path: str | Path, expected: EmbeddingBackendSpec | None = None) -> VectorIndex:
    path = Path(path)
    data = path.read_bytes()
    prefix = len(MAGIC) + 8
    if len(data) < prefix or data[: len(MAGIC)] != MAGIC:
        raise IndexFormatError(f"{path} is not a vector index file")
    (header_len,) = struct.unpack("<Q", data[len(MAGIC) : prefix])
    if len(data) < prefix + header_len:
        raise IndexFormatError(f"{path} is truncated inside its header")
    try:
        header = json.loads(data[prefix : prefix + header_len].decode("utf-8"))
        fp = header["fingerprint"]
        fingerprint = BackendFingerprint(fp["kind"], fp["ident"], int(fp["dim"]))
        chunks = [
            Chunk(c["doc_path"], c["ordinal"], c["start"], c["end"], c["text"], c["overlap_len"])
            for c in header["chunks"]
        ]
        count = int(header["count"])
        version = header["version"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise IndexFormatError(f"{path} has a corrupt header: {e}") from e
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"{path} has unsupported format version {version}")
    if count != len(chunks):
        raise IndexFormatError(f"{path} header lists {len(chunks)} chunks but declares {count}")

    body = data[prefix + header_len :]
    expected_len = count * fingerprint.dim * 4
    if len(body) != expected_len:
        raise IndexFormatError(f"{path} holds {len(body)} record bytes, expected {expected_len}")
    vectors = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(count, fingerprint.dim)
    if not np.all(np.isfinite(vectors)):
        raise IndexFormatError(f"{path} contains non-finite vectors")

    index = VectorIndex(fingerprint, chunks, vectors, header.get("manifest"))
    if expected is not None:
        index.check_backend(expected)
    return index


def build_index(
    chunks: list[Chunk],
    spec: EmbeddingBackendSpec,
    manifest: dict | None = None,
    embedder: Embedder | None = None,
    progress=tqdm,
) -> VectorIndex:
    embedder = embedder or Embedder(spec)
    vectors = embedder.embed([c.text for c in chunks], progress=progress)
    return VectorIndex(spec.fingerprint(), chunks, vectors, manifest)
