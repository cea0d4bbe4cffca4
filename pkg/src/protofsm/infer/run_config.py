"""Run configuration: one TOML file, one nested dataclass per section."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path

import tomli

from protofsm.augment.code_filter import FilterConfig
from protofsm.augment.segmenter import SegmenterConfig
from protofsm.augment.vector_store import EmbeddingBackendSpec
from protofsm.errors import ConfigError
from protofsm.infer.gateway import BACKENDS, ChatConfig
from protofsm.infer.utils_infer import ConsensusConfig, RetrievalSettings, retrieval_k


PACKAGED_PREFIX = "infer/examples/"
TOP_LEVEL_KEYS = (
    "repo",
    "protocol",
    "keyword_file",
    "output_dir",
    "retrieval_k",
    "retrieval_mode",
    "nprobe",
    "backend",
    "fixtures",
    "separators",
)


@dataclass(frozen=True)
class Variant:
    """Pipeline switches; turning one off reproduces an ablated pipeline."""

    code_filter: bool = True
    syntax_aware: bool = True
    retrieval: bool = True


@dataclass(frozen=True)
class ImplementationConfig:
    repo: str | None = None
    commit: str | None = None


@dataclass(frozen=True)
class RunConfig:
    protocol: str
    repo: str | None = None
    keyword_file: str | None = None
    output_dir: str = "outputs"
    retrieval_k: int = retrieval_k
    retrieval_mode: str = "exact"
    nprobe: int = 2
    backend: str = "remote"
    fixtures: str | None = None
    separators: str | None = None
    filter: FilterConfig = field(default_factory=FilterConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    embedding: EmbeddingBackendSpec = field(default_factory=EmbeddingBackendSpec)
    chat: ChatConfig = field(default_factory=ChatConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    implementation: ImplementationConfig = field(default_factory=ImplementationConfig)
    variant: Variant = field(default_factory=Variant)

    def __post_init__(self):
        if not self.protocol:
            raise ConfigError("protocol is required")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == "fixture" and not self.fixtures:
            raise ConfigError("backend fixture needs a fixtures file")
        if self.retrieval_mode not in ("exact", "ivf"):
            raise ConfigError(f"retrieval_mode must be exact or ivf, got {self.retrieval_mode!r}")
        if self.nprobe < 1:
            raise ConfigError("nprobe must be >= 1")
        output = Path(self.output_dir)
        if output.exists() and not output.is_dir():
            raise ConfigError(f"output_dir {output} exists and is not a directory")

    @property
    def retrieval(self) -> RetrievalSettings:
        return RetrievalSettings(
            enabled=self.variant.retrieval,
            k=self.retrieval_k,
            mode=self.retrieval_mode,
            nprobe=self.nprobe,
            context_window=self.chat.context_window,
            max_output_tokens=self.chat.max_output_tokens,
            chars_per_token=self.segmenter.chars_per_token,
        )


def resolve_path(value: str | None) -> str | None:
    """Paths under infer/examples/ point into the installed package; anything else is taken as given."""
    if not value:
        return value
    if value.startswith(PACKAGED_PREFIX) and not Path(value).exists():
        return str(files("protofsm").joinpath(value))
    return value


def _section(cls, data: dict, name: str, **convert):
    section = dict(data.get(name) or {})
    for key, fn in convert.items():
        if key in section:
            section[key] = fn(section[key])
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigError(f"[{name}]: {e}") from e


def run_config_from_dict(data: dict) -> RunConfig:
    sections = {"filter", "segmenter", "embedding", "chat", "consensus", "implementation", "variant"}
    unknown = sorted(set(data) - sections - set(TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    top = {key: data[key] for key in TOP_LEVEL_KEYS if key in data}
    for key in ("repo", "keyword_file", "fixtures", "separators"):
        if key in top:
            top[key] = resolve_path(top[key])
    if "protocol" not in top:
        raise ConfigError("protocol is required")
    return RunConfig(
        **top,
        filter=_section(FilterConfig, data, "filter", extensions=tuple),
        segmenter=_section(SegmenterConfig, data, "segmenter"),
        embedding=_section(EmbeddingBackendSpec, data, "embedding"),
        chat=_section(ChatConfig, data, "chat"),
        consensus=_section(ConsensusConfig, data, "consensus"),
        implementation=_section(ImplementationConfig, data, "implementation"),
        variant=_section(Variant, data, "variant"),
    )


def load_config_file(path: str | Path) -> dict:
    path = resolve_path(str(path))
    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e


def load_run_config(path: str | Path, **overrides) -> RunConfig:
    """Read a TOML run config; non-None overrides replace top-level values."""
    data = load_config_file(path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return run_config_from_dict(data)
