"""Syntax-aware recursive code segmentation.

1. split: cut at the highest-level separator that yields pieces, greedily
   pack neighbours up to max_chunk_size, and descend to the next level for
   any piece still too large
2. merge: fold pieces below min_chunk_size into the following neighbour
   (the preceding one when there is none or it would overflow); when neither
   fits, move the boundary between the two instead
3. overlap: prefix each chunk with the tail of the previous chunk's core

Sizes and offsets are in characters of the decoded document.
"""

from __future__ import annotations

import bisect
import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path, PurePosixPath

from omegaconf import OmegaConf

from protofsm.errors import ConfigError, IntegrityError
from protofsm.model.utils import dumps_document, package_path


logger = logging.getLogger(__name__)

# ----- Settings -----

MAX_CHUNK_SIZE = 4000
MIN_CHUNK_SIZE = 400
OVERLAP = 200
CHARS_PER_TOKEN = 4

# -----------------------------------------


@dataclass(frozen=True)
class SegmenterConfig:
    max_chunk_size: int = MAX_CHUNK_SIZE
    min_chunk_size: int = MIN_CHUNK_SIZE
    overlap: int = OVERLAP
    language: str = "auto"  # a separator-table key, or "auto" to pick by file extension
    chars_per_token: int = CHARS_PER_TOKEN

    def __post_init__(self):
        if self.max_chunk_size <= 0:
            raise ConfigError("segmenter.max_chunk_size must be > 0")
        if not 0 <= self.min_chunk_size < self.max_chunk_size:
            raise ConfigError("segmenter.min_chunk_size must satisfy 0 <= min < max")
        if not 0 <= self.overlap < self.max_chunk_size:
            raise ConfigError("segmenter.overlap must satisfy 0 <= overlap < max")
        if self.chars_per_token <= 0:
            raise ConfigError("segmenter.chars_per_token must be > 0")
        if 2 * self.min_chunk_size > self.max_chunk_size:
            logger.warning(
                f"min_chunk_size {self.min_chunk_size} is more than half of max_chunk_size {self.max_chunk_size}; "
                "small pieces may remain below the minimum"
            )

    def to_document(self) -> dict:
        return {
            "max_chunk_size": self.max_chunk_size,
            "min_chunk_size": self.min_chunk_size,
            "overlap": self.overlap,
            "language": self.language,
            "chars_per_token": self.chars_per_token,
        }


@dataclass(frozen=True)
class SeparatorTable:
    language: str
    separators: tuple[str, ...]
    compiled: tuple[re.Pattern | None, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.separators or self.separators[-1] != "":
            raise ConfigError(f"separator table {self.language!r} must end with the empty (any character) pattern")
        compiled = []
        for sep in self.separators:
            if sep == "":
                compiled.append(None)
                continue
            try:
                compiled.append(re.compile(sep, re.MULTILINE))
            except re.error as e:
                raise ConfigError(f"separator {sep!r} of {self.language!r} does not compile: {e}") from e
        object.__setattr__(self, "compiled", tuple(compiled))


@lru_cache(maxsize=8)
def load_separator_config(override: str | Path | None = None):
    cfg = OmegaConf.load(package_path("configs/separators.yaml"))
    if override:
        cfg = OmegaConf.merge(cfg, OmegaConf.load(override))
    return cfg


@lru_cache(maxsize=8)
def load_separator_tables(override: str | Path | None = None) -> dict[str, SeparatorTable]:
    cfg = load_separator_config(override)
    return {
        lang: SeparatorTable(lang, tuple(str(s) for s in seps))
        for lang, seps in OmegaConf.to_container(cfg.languages).items()
    }


def detect_language(path: str, override: str | Path | None = None) -> str:
    extensions = OmegaConf.to_container(load_separator_config(override).extensions)
    return extensions.get(PurePosixPath(path).suffix.lower(), "text")


@dataclass(frozen=True)
class Chunk:
    doc_path: str
    ordinal: int
    start: int  # core region [start, end) in the document
    end: int
    text: str
    overlap_len: int = 0

    @property
    def core(self) -> str:
        return self.text[self.overlap_len :]

    @property
    def ref(self) -> str:
        return f"{self.doc_path}#{self.ordinal}"


class Segmenter:
    def __init__(self, config: SegmenterConfig | None = None, tables: dict[str, SeparatorTable] | None = None):
        self.config = config or SegmenterConfig()
        self.tables = tables if tables is not None else load_separator_tables()

    def table_for(self, doc_path: str) -> SeparatorTable:
        language = self.config.language
        if language == "auto":
            language = detect_language(doc_path)
        try:
            return self.tables[language]
        except KeyError:
            raise ConfigError(f"no separator table for language {language!r}") from None

    def segment(self, document: str | bytes, doc_path: str = "") -> list[Chunk]:
        text = decode_document(document, doc_path)
        if not text:
            return []
        table = self.table_for(doc_path)
        run = _Run(text, table, self.config)
        cores = run.merge(run.split(0, len(text), 0))
        return _with_overlap(text, cores, doc_path, self.config.overlap)


def decode_document(document: str | bytes, doc_path: str = "") -> str:
    if isinstance(document, str):
        return document
    try:
        return document.decode("utf-8")
    except UnicodeDecodeError:
        logger.warning(f"{doc_path or 'document'}: invalid UTF-8 replaced")
        return document.decode("utf-8", errors="replace")


class _Run:
    """State of one segmentation: the text, its table and cached separator positions."""

    def __init__(self, text: str, table: SeparatorTable, config: SegmenterConfig):
        self.text = text
        self.table = table
        self.max = config.max_chunk_size
        self.min = config.min_chunk_size
        self._positions: dict[int, list[int]] = {}

    def positions(self, level: int) -> list[int]:
        if level not in self._positions:
            pattern = self.table.compiled[level]
            self._positions[level] = sorted({m.start() for m in pattern.finditer(self.text)})
        return self._positions[level]

    def cuts(self, start: int, end: int, level: int) -> list[int]:
        """Separator positions strictly inside (start, end)."""
        pos = self.positions(level)
        return pos[bisect.bisect_right(pos, start) : bisect.bisect_left(pos, end)]

    # phase 1

    def split(self, start: int, end: int, level: int) -> list[tuple[int, int]]:
        if end - start <= self.max:
            return [(start, end)]

        cuts: list[int] = []
        while self.table.compiled[level] is not None:
            cuts = self.cuts(start, end, level)
            if cuts:
                break
            level += 1
        if self.table.compiled[level] is None:
            return [(s, min(s + self.max, end)) for s in range(start, end, self.max)]

        bounds = [start, *cuts, end]
        packed = []
        cur_start, cur_end = start, start
        for a, b in zip(bounds, bounds[1:]):
            if b - cur_start <= self.max:
                cur_end = b
            else:
                if cur_end > cur_start:
                    packed.append((cur_start, cur_end))
                cur_start, cur_end = a, b
        packed.append((cur_start, cur_end))

        pieces = []
        for a, b in packed:
            if b - a > self.max:
                pieces.extend(self.split(a, b, level + 1))
            else:
                pieces.append((a, b))
        return pieces

    # phase 2

    def merge(self, pieces: list[tuple[int, int]]) -> list[tuple[int, int]]:
        pieces = list(pieces)
        i = 0
        while i < len(pieces):
            s, e = pieces[i]
            if e - s >= self.min or len(pieces) == 1:
                i += 1
                continue
            if i + 1 < len(pieces) and pieces[i + 1][1] - s <= self.max:
                pieces[i : i + 2] = [(s, pieces[i + 1][1])]
                continue
            if i > 0 and e - pieces[i - 1][0] <= self.max:
                pieces[i - 1 : i + 1] = [(pieces[i - 1][0], e)]
                i -= 1
                continue
            lo = i if i + 1 < len(pieces) else i - 1
            a, b = pieces[lo][0], pieces[lo + 1][1]
            cut = self.rebalance(a, b)
            if cut is None:
                logger.debug(f"piece [{s}, {e}) stays below min_chunk_size")
                i += 1
                continue
            pieces[lo : lo + 2] = [(a, cut), (cut, b)]
            i = lo + 2
        return pieces

    def rebalance(self, a: int, b: int) -> int | None:
        """A cut in [a, b) leaving both sides within [min, max], at the highest-level separator available."""
        lo = max(a + self.min, b - self.max)
        hi = min(a + self.max, b - self.min)
        if lo > hi:
            return None
        for level in range(len(self.table.separators)):
            if self.table.compiled[level] is None:
                return lo
            pos = self.positions(level)
            k = bisect.bisect_left(pos, lo)
            if k < len(pos) and pos[k] <= hi:
                return pos[k]
        return lo


def _with_overlap(text: str, cores: list[tuple[int, int]], doc_path: str, overlap: int) -> list[Chunk]:
    chunks = []
    for ordinal, (start, end) in enumerate(cores):
        prefix = ""
        if ordinal > 0 and overlap > 0:
            prev_start, prev_end = cores[ordinal - 1]
            prefix = text[max(prev_start, prev_end - overlap) : prev_end]
        chunks.append(Chunk(doc_path, ordinal, start, end, prefix + text[start:end], len(prefix)))
    return chunks


def segment(document: str | bytes, config: SegmenterConfig | None = None, doc_path: str = "") -> list[Chunk]:
    return Segmenter(config).segment(document, doc_path)


def reconstruct(chunks: list[Chunk]) -> str:
    if not chunks:
        return ""
    parts = []
    expected_start = 0
    for i, chunk in enumerate(chunks):
        if chunk.doc_path != chunks[0].doc_path:
            raise IntegrityError(f"chunk {chunk.ref} belongs to another document")
        if chunk.ordinal != i:
            raise IntegrityError(f"expected ordinal {i}, found {chunk.ordinal}")
        if chunk.start != expected_start:
            kind = "gap" if chunk.start > expected_start else "overlap"
            raise IntegrityError(f"{kind} in core regions before {chunk.ref} at offset {expected_start}")
        if len(chunk.core) != chunk.end - chunk.start:
            raise IntegrityError(f"chunk {chunk.ref} core length does not match its range")
        parts.append(chunk.core)
        expected_start = chunk.end
    return "".join(parts)


# debugging manifest


def chunk_manifest(chunks: list[Chunk]) -> list[dict]:
    return [
        {"path": c.doc_path, "ordinal": c.ordinal, "start": c.start, "end": c.end, "overlap_len": c.overlap_len}
        for c in chunks
    ]


def write_chunk_manifest(chunks: list[Chunk], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_document(chunk_manifest(chunks)), encoding="utf-8")
    return path


def read_chunk_manifest(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
