import logging
from datetime import datetime, timezone
from importlib.resources import files
from pathlib import Path, PurePosixPath

from tqdm import tqdm

from protofsm.augment.code_filter import (
    FilterConfig,
    ModuleSelection,
    list_sources,
    read_source,
    resolve_keywords,
    scan,
    select_module,
)
from protofsm.augment.segmenter import Chunk, Segmenter, SegmenterConfig, load_separator_tables
from protofsm.augment.vector_store import Embedder, EmbeddingBackendSpec, VectorIndex, build_index, load
from protofsm.errors import EmptyRepo
from protofsm.eval.utils_eval import EvalReport, GroundTruth, evaluate
from protofsm.fuzz.seeds import generate_sequences, load_templates, render_seeds
from protofsm.infer.gateway import ChatConfig, ChatGateway, FixtureBook
from protofsm.infer.run_config import RunConfig, Variant
from protofsm.infer.utils_infer import ConsensusConfig, RetrievalSettings, infer_fsm
from protofsm.model.document import load_fsm
from protofsm.model.fsm import FsmDiff, FsmModel, Implementation, determinize, diff
from protofsm.model.utils import config_digest, read_git_commit, sha256_bytes, sha256_text


logger = logging.getLogger(__name__)


class ProtocolFSM:
    """Infers the protocol state machine of one implementation repository.

    Holds the per-run configuration and the backends; each method is one
    pipeline step and can be called on its own.
    """

    def __init__(
        self,
        protocol: str,
        repo=None,
        keyword_file=None,
        filter_config: FilterConfig | None = None,
        segmenter_config: SegmenterConfig | None = None,
        embedding: EmbeddingBackendSpec | None = None,
        chat: ChatConfig | None = None,
        consensus: ConsensusConfig | None = None,
        retrieval: RetrievalSettings | None = None,
        backend="remote",
        fixtures=None,
        separators=None,
        variant: Variant | None = None,
        implementation: Implementation | None = None,
        chat_client=None,
        embedding_client=None,
    ):
        self.protocol = protocol
        self.repo = Path(repo) if repo else None
        self.keyword_file = keyword_file
        self.filter_config = filter_config or FilterConfig()
        self.segmenter_config = segmenter_config or SegmenterConfig()
        self.variant = variant or Variant()
        self.retrieval = retrieval or RetrievalSettings(enabled=self.variant.retrieval)
        self.consensus = consensus or ConsensusConfig()
        self.separators = separators
        self.implementation = implementation

        self.embedder = Embedder(embedding, client=embedding_client)
        book = FixtureBook.load(fixtures) if backend == "fixture" and fixtures else None
        self.gateway = ChatGateway(chat, backend=backend, fixtures=book, client=chat_client)

    @classmethod
    def from_config(cls, cfg: RunConfig, **kwargs):
        implementation = None
        if cfg.implementation.repo or cfg.implementation.commit:
            implementation = Implementation(cfg.implementation.repo or "", cfg.implementation.commit or "")
        return cls(
            cfg.protocol,
            repo=cfg.repo,
            keyword_file=cfg.keyword_file,
            filter_config=cfg.filter,
            segmenter_config=cfg.segmenter,
            embedding=cfg.embedding,
            chat=cfg.chat,
            consensus=cfg.consensus,
            retrieval=cfg.retrieval,
            backend=cfg.backend,
            fixtures=cfg.fixtures,
            separators=cfg.separators,
            variant=cfg.variant,
            implementation=implementation,
            **kwargs,
        )

    # code filtering

    def select_module(self, progress=tqdm) -> ModuleSelection:
        keywords = resolve_keywords(self.protocol, self.keyword_file)
        matches = scan(self.repo, keywords, self.filter_config, progress=progress)
        return select_module(
            matches,
            min_docs=self.filter_config.min_docs,
            weight_by_hits=self.filter_config.weight_by_hits,
            hit_saturation=self.filter_config.hit_saturation,
        )

    def module_documents(self, module: str) -> dict[str, bytes]:
        """Readable text sources under module ("." is the whole repository), by path."""
        documents = {}
        for rel in list_sources(self.repo, self.filter_config):
            if module != "." and not PurePosixPath(rel).is_relative_to(module):
                continue
            data = read_source(self.repo, rel)
            if data is not None:
                documents[rel] = data
        if not documents:
            raise EmptyRepo(f"no source files under {self.repo / module}")
        return documents

    # indexing

    def segment(self, documents: dict[str, bytes]) -> list[Chunk]:
        config = self.segmenter_config
        if not self.variant.syntax_aware:
            config = SegmenterConfig(
                config.max_chunk_size, config.min_chunk_size, config.overlap, "fixed", config.chars_per_token
            )
        segmenter = Segmenter(config, load_separator_tables(self.separators))
        chunks = []
        for rel in sorted(documents):
            chunks.extend(segmenter.segment(documents[rel], rel))
        return chunks

    def snapshot(self, documents: dict[str, bytes]) -> dict:
        commit = read_git_commit(self.repo)
        if commit is None:
            listing = "\n".join(f"{rel} {sha256_bytes(documents[rel])}" for rel in sorted(documents))
            commit = "sha256:" + sha256_text(listing)[:16]
        newest = max((self.repo / rel).stat().st_mtime for rel in documents)
        created = datetime.fromtimestamp(newest, tz=timezone.utc).isoformat(timespec="seconds")
        return {"commit": commit, "created": created}

    def build_index(self, progress=tqdm) -> tuple[VectorIndex, ModuleSelection | None]:
        if self.variant.code_filter:
            selection = self.select_module(progress=progress)
            module = selection.chosen_dir
            logger.info(f"selected module {module} (match rate {float(selection.match_rate) * 100:.2f}%)")
        else:
            selection, module = None, "."
            logger.info("code filtering disabled; indexing the whole repository")

        documents = self.module_documents(module)
        chunks = self.segment(documents)
        snapshot = self.snapshot(documents)
        manifest = {
            "protocol": self.protocol,
            "module": module,
            "documents": len(documents),
            "repo_snapshot": snapshot["commit"],
            "created": snapshot["created"],
            "segmenter_digest": config_digest(self.segmenter_config.to_document()),
            "variant": {"code_filter": self.variant.code_filter, "syntax_aware": self.variant.syntax_aware},
        }
        index = build_index(chunks, self.embedder.spec, manifest, self.embedder, progress=progress)
        logger.info(f"indexed {len(documents)} documents as {len(index)} chunks")
        return index, selection

    def load_index(self, path) -> VectorIndex:
        return load(path, self.embedder.spec)

    def implementation_identity(self, index: VectorIndex | None = None) -> Implementation:
        if self.implementation is not None:
            return self.implementation
        name = self.repo.resolve().name if self.repo else ""
        commit = (index.manifest or {}).get("repo_snapshot", "") if index is not None else ""
        if not commit and self.repo:
            commit = read_git_commit(self.repo) or ""
        return Implementation(name, commit)

    # inference

    def infer(self, index: VectorIndex | None = None, show_info=logger.info, progress=tqdm) -> tuple[FsmModel, dict]:
        self.gateway.check_credentials()
        implementation = self.implementation_identity(index)
        return infer_fsm(
            self.protocol,
            index if self.retrieval.enabled else None,
            self.gateway,
            self.consensus,
            self.embedder,
            self.retrieval,
            implementation,
            show_info=show_info,
            progress=progress,
        )

    # downstream steps

    @staticmethod
    def evaluate(inferred: FsmModel, ground_truth: GroundTruth, name: str | None = None) -> EvalReport:
        return evaluate(inferred, ground_truth, name)

    @staticmethod
    def diff(a: FsmModel, b: FsmModel) -> FsmDiff:
        return diff(a, b)

    @staticmethod
    def determinize(fsm: FsmModel) -> FsmModel:
        return determinize(fsm)

    @staticmethod
    def seeds(fsm: FsmModel, templates_dir, out_dir, parallelism: int = 4) -> list[Path]:
        return render_seeds(generate_sequences(fsm), load_templates(templates_dir), out_dir, parallelism)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    toy = files("protofsm").joinpath("infer/examples/toy")

    pfsm = ProtocolFSM(
        "toy",
        repo=str(toy.joinpath("repo")),
        keyword_file=str(toy.joinpath("toy_keywords.txt")),
        backend="fixture",
        fixtures=str(toy.joinpath("fixtures.json")),
        implementation=Implementation("toy-protocol", "0000000"),
    )
    index, selection = pfsm.build_index()
    fsm, report = pfsm.infer(index)
    print(fsm)

    gt = GroundTruth(load_fsm(str(toy.joinpath("golden_fsm.json"))))
    print(pfsm.evaluate(fsm, gt).metrics)
