"""Locate the state-machine module of a protocol implementation.

Every source file is matched against a protocol keyword set; the directory
whose subtree has the highest fraction of matching source files wins.
"""

from __future__ import annotations

import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path, PurePosixPath

from tqdm import tqdm

from protofsm.errors import ConfigError, EmptyRepo, NoModuleFound, RepoIOError, UnknownProtocol
from protofsm.model.utils import package_path


logger = logging.getLogger(__name__)

# ----- Settings -----

SOURCE_EXTENSIONS = (".c", ".h", ".cc", ".cpp", ".hpp", ".py", ".go", ".rs", ".java")
BINARY_PROBE_BYTES = 8192
MIN_DOCS = 2
HIT_SATURATION = 5

KEYWORD_SOURCES = ("rfc", "expert")
WHOLE_TOKEN_PREFIX = "word:"

# label spellings accepted for the shipped keyword sets, after lowercasing and dropping punctuation
PROTOCOL_ALIASES = {
    "ikev2": "ikev2",
    "ike": "ikev2",
    "tls": "tls",
    "tls12": "tls",
    "tls13": "tls",
    "ssl": "tls",
    "bgp": "bgp",
    "bgp4": "bgp",
    "rtsp": "rtsp",
    "l2tp": "l2tp",
    "l2tpv2": "l2tp",
    "l2tpv3": "l2tp",
}

# -----------------------------------------


@dataclass(frozen=True)
class Keyword:
    pattern: str
    source: str = "rfc"
    whole_token: bool = False
    regex: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.source not in KEYWORD_SOURCES:
            raise ConfigError(f"keyword {self.pattern!r}: source must be one of {KEYWORD_SOURCES}")
        body = self.pattern
        if self.whole_token:
            # identifiers are tokens, so underscores bound a token just like punctuation does
            body = rf"(?<![0-9A-Za-z])(?:{body})(?![0-9A-Za-z])"
        try:
            object.__setattr__(self, "regex", re.compile(body, re.IGNORECASE))
        except re.error as e:
            raise ConfigError(f"keyword {self.pattern!r} does not compile: {e}") from e

    def count(self, text: str) -> int:
        return sum(1 for _ in self.regex.finditer(text))


@dataclass(frozen=True)
class KeywordSet:
    protocol: str
    keywords: tuple[Keyword, ...]

    def __post_init__(self):
        if not self.keywords:
            raise ConfigError(f"keyword set for {self.protocol!r} is empty")

    def hits(self, text: str) -> tuple[tuple[str, int], ...]:
        found = []
        for kw in self.keywords:
            n = kw.count(text)
            if n:
                found.append((kw.pattern, n))
        return tuple(found)


def parse_keywords(text: str, protocol: str) -> KeywordSet:
    """One pattern per line; "#" starts a comment; [rfc]/[expert] switch the tag of following lines.

    A pattern prefixed with "word:" only matches as a whole token.
    """
    source = "rfc"
    keywords = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        section = re.fullmatch(r"\[(\w+)\]", line)
        if section:
            source = section.group(1).lower()
            if source not in KEYWORD_SOURCES:
                raise ConfigError(f"unknown keyword section [{source}]")
            continue
        whole = line.startswith(WHOLE_TOKEN_PREFIX)
        if whole:
            line = line[len(WHOLE_TOKEN_PREFIX) :].strip()
        keywords.append(Keyword(line, source, whole))
    return KeywordSet(protocol, tuple(keywords))


def load_keywords(path: str | Path, protocol: str) -> KeywordSet:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read keyword file {path}: {e}") from e
    return parse_keywords(text, protocol)


def protocol_key(protocol: str) -> str | None:
    return PROTOCOL_ALIASES.get(re.sub(r"[^0-9a-z]", "", protocol.lower()))


def builtin_keywords(protocol: str) -> KeywordSet:
    key = protocol_key(protocol)
    if key is None:
        raise UnknownProtocol(f"no built-in keyword set for protocol {protocol!r}; pass a keyword file")
    return load_keywords(package_path(f"configs/keywords/{key}.txt"), protocol)


def resolve_keywords(protocol: str, keyword_file: str | Path | None = None) -> KeywordSet:
    if keyword_file:
        return load_keywords(keyword_file, protocol)
    return builtin_keywords(protocol)


# scanning


@dataclass(frozen=True)
class FilterConfig:
    extensions: tuple[str, ...] = SOURCE_EXTENSIONS
    min_docs: int = MIN_DOCS
    weight_by_hits: bool = False
    hit_saturation: int = HIT_SATURATION
    parallelism: int = 4

    def __post_init__(self):
        object.__setattr__(self, "extensions", tuple(e.lower() for e in self.extensions))
        if self.min_docs < 1:
            raise ConfigError("filter.min_docs must be >= 1")
        if self.hit_saturation < 1:
            raise ConfigError("filter.hit_saturation must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("filter.parallelism must be >= 1")


@dataclass(frozen=True)
class DocumentMatch:
    path: str
    is_source: bool
    matched: bool
    hits: tuple[tuple[str, int], ...] = ()

    @property
    def hit_count(self) -> int:
        return sum(n for _, n in self.hits)


def list_files(repo_root: Path) -> list[str]:
    """Repo-relative POSIX paths of every regular file, hidden directories and files skipped."""
    try:
        os.listdir(repo_root)
    except OSError as e:
        raise RepoIOError(f"cannot read repository root {repo_root}: {e}") from e

    def on_error(e: OSError):
        logger.warning(f"skipping unreadable directory: {e}")

    found = []
    for root, dirs, names in os.walk(repo_root, onerror=on_error):
        dirs[:] = sorted(d for d in dirs if not d.startswith("."))
        for name in sorted(names):
            if name.startswith("."):
                continue
            full = Path(root) / name
            if full.is_file():
                found.append(full.relative_to(repo_root).as_posix())
    return sorted(found)


def read_source(repo_root: Path, rel: str) -> bytes | None:
    """File bytes, or None for unreadable and binary files (NUL byte in the first block)."""
    try:
        data = (repo_root / rel).read_bytes()
    except OSError as e:
        logger.warning(f"skipping unreadable file {rel}: {e}")
        return None
    if b"\x00" in data[:BINARY_PROBE_BYTES]:
        logger.warning(f"skipping binary file {rel}")
        return None
    return data


def list_sources(repo_root: str | Path, config: FilterConfig | None = None) -> list[str]:
    config = config or FilterConfig()
    repo_root = Path(repo_root)
    if not repo_root.is_dir():
        raise RepoIOError(f"repository root {repo_root} is not a readable directory")
    return [f for f in list_files(repo_root) if PurePosixPath(f).suffix.lower() in config.extensions]


def _scan_one(repo_root: Path, rel: str, ks: KeywordSet) -> DocumentMatch | None:
    data = read_source(repo_root, rel)
    if data is None:
        return None
    hits = ks.hits(data.decode("utf-8", errors="replace"))
    return DocumentMatch(rel, True, bool(hits), hits)


def scan(
    repo_root: str | Path, ks: KeywordSet, config: FilterConfig | None = None, progress=tqdm
) -> list[DocumentMatch]:
    config = config or FilterConfig()
    repo_root = Path(repo_root)
    if not repo_root.is_dir():
        raise RepoIOError(f"repository root {repo_root} is not a readable directory")

    files = list_files(repo_root)
    sources = [f for f in files if PurePosixPath(f).suffix.lower() in config.extensions]
    source_set = set(sources)
    results = [DocumentMatch(f, False, False) for f in files if f not in source_set]

    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        scanned = pool.map(lambda rel: _scan_one(repo_root, rel, ks), sources)
        scanned = [m for m in progress(scanned, total=len(sources), desc="Scanning", disable=None) if m is not None]

    if not scanned:
        raise EmptyRepo(f"no source files under {repo_root} (extensions: {' '.join(config.extensions)})")
    results.extend(scanned)
    return sorted(results, key=lambda m: m.path)


# module selection


@dataclass(frozen=True)
class DirectoryRate:
    dir: str
    matched_docs: int
    total_docs: int
    rate: Fraction

    @property
    def depth(self) -> int:
        return 0 if self.dir == "." else self.dir.count("/") + 1


@dataclass(frozen=True)
class ModuleSelection:
    chosen_dir: str
    match_rate: Fraction
    table: tuple[DirectoryRate, ...]

    def to_document(self) -> dict:
        return {
            "chosen_dir": self.chosen_dir,
            "match_rate": f"{self.match_rate.numerator}/{self.match_rate.denominator}",
            "table": [
                {
                    "dir": row.dir,
                    "matched_docs": row.matched_docs,
                    "total_docs": row.total_docs,
                    "rate": f"{row.rate.numerator}/{row.rate.denominator}",
                }
                for row in self.table
            ],
        }


def ancestors(path: str) -> list[str]:
    """'src/sm/a.c' -> ['.', 'src', 'src/sm']"""
    parts = PurePosixPath(path).parts[:-1]
    return ["."] + ["/".join(parts[: i + 1]) for i in range(len(parts))]


def select_module(
    matches: list[DocumentMatch],
    min_docs: int = MIN_DOCS,
    weight_by_hits: bool = False,
    hit_saturation: int = HIT_SATURATION,
) -> ModuleSelection:
    """Rank every directory holding >= min_docs source files in its subtree.

    Ranking is by rate, then matched docs, then shallower path, then path; the
    table comes back in ranking order.
    """
    sources = [m for m in matches if m.is_source]
    if not any(m.matched for m in sources):
        raise NoModuleFound("no source document matched the keyword set")

    totals: dict[str, int] = {}
    matched: dict[str, int] = {}
    weights: dict[str, int] = {}
    for m in sources:
        for d in ancestors(m.path):
            totals[d] = totals.get(d, 0) + 1
            matched[d] = matched.get(d, 0) + int(m.matched)
            weights[d] = weights.get(d, 0) + min(m.hit_count, hit_saturation)

    rows = []
    for d, total in totals.items():
        if total < min_docs:
            continue
        if weight_by_hits:
            rate = Fraction(weights[d], total * hit_saturation)
        else:
            rate = Fraction(matched[d], total)
        rows.append(DirectoryRate(d, matched[d], total, rate))

    if not rows:
        raise NoModuleFound(f"no directory holds at least {min_docs} source files")
    rows.sort(key=lambda r: (-r.rate, -r.matched_docs, r.depth, r.dir))
    if rows[0].matched_docs == 0:
        raise NoModuleFound(f"no directory with at least {min_docs} source files has a matching document")
    return ModuleSelection(rows[0].dir, rows[0].rate, tuple(rows))


def format_selection(selection: ModuleSelection) -> str:
    width = max(len("directory"), *(len(r.dir) for r in selection.table))
    lines = [f"{'directory':<{width}}  matched  total    rate"]
    for r in selection.table:
        mark = " *" if r.dir == selection.chosen_dir else ""
        lines.append(f"{r.dir:<{width}}  {r.matched_docs:>7}  {r.total_docs:>5}  {float(r.rate) * 100:6.2f}%{mark}")
    return "\n".join(lines)
