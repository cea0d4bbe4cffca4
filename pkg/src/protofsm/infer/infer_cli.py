import argparse
import logging
import os
from importlib.resources import files
from pathlib import Path

from tqdm import tqdm

from protofsm.api import ProtocolFSM
from protofsm.augment.code_filter import format_selection
from protofsm.augment.segmenter import write_chunk_manifest
from protofsm.errors import ConfigError, InferenceFailed, ProtoFsmError
from protofsm.eval.utils_eval import dumps_reports, evaluate, format_table, load_ground_truth
from protofsm.fuzz.seeds import MANIFEST_NAME, generate_sequences, load_templates, render_seeds
from protofsm.infer.run_config import RunConfig, load_config_file, resolve_path, run_config_from_dict
from protofsm.model.document import diff_to_document, diff_to_dot, load_fsm, save_fsm, serialize, to_dot
from protofsm.model.fsm import determinize, diff
from protofsm.model.utils import dumps_document, silent


logger = logging.getLogger("protofsm")

INDEX_NAME = "index.fsmidx"
CHUNKS_NAME = "chunks.json"
SELECTION_NAME = "selection.json"
FSM_NAME = "fsm.json"
REPORT_NAME = "report.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofsm",
        description="Infer protocol state machines from implementation source code with an LLM.",
        epilog="Specify options above to override one or more settings from config.",
    )
    parser.add_argument(
        "-c",
        "--config",
        type=str,
        default=os.path.join(files("protofsm").joinpath("infer/examples/basic"), "basic.toml"),
        help="The configuration file, default see infer/examples/basic/basic.toml",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log debug messages")
    parser.add_argument("-q", "--quiet", action="store_true", help="Disable progress bars")
    commands = parser.add_subparsers(dest="command", required=True)

    # Note. Not to provide default values here in order to read defaults from the config file
    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("-r", "--repo", type=str, help="The implementation repository to analyse")
    run.add_argument("-p", "--protocol", type=str, help="The protocol label, e.g. IKEv2")
    run.add_argument("-k", "--keyword_file", type=str, help="A keyword file replacing the built-in set")
    run.add_argument("-o", "--output_dir", type=str, help="The path to output folder")
    run.add_argument("--backend", type=str, choices=["remote", "fixture"], help="Chat backend")
    run.add_argument("--fixtures", type=str, help="The fixture book for --backend fixture")

    commands.add_parser("index", parents=[run], help="Select the protocol module, segment and embed it")

    infer = commands.add_parser("infer", parents=[run], help="Infer the FSM with staged, voted chat dialogues")
    infer.add_argument("-n", "--iterations", type=int, help="Dialogues per stage, default 20")
    infer.add_argument("--index", type=str, help="Index file, default <output_dir>/index.fsmidx")
    infer.add_argument("--build_index", "--build-index", action="store_true", help="Build the index before inferring")
    infer.add_argument("--dot", action="store_true", help="Also write fsm.dot")

    ev = commands.add_parser("eval", help="Score inferred FSMs against a ground truth")
    ev.add_argument("fsm_files", nargs="+", help="Inferred FSM documents, one table row each")
    ev.add_argument("-g", "--ground_truth", "--ground-truth", type=str, required=True, help="Ground-truth document")
    ev.add_argument("-o", "--output", type=str, help="Write the evaluation report document here")

    df = commands.add_parser("diff", help="Compare two FSMs")
    df.add_argument("a")
    df.add_argument("b")
    df.add_argument("-o", "--output", type=str, help="Write the diff document here")
    df.add_argument("--dot", type=str, help="Write a DOT graph of the diff here")

    det = commands.add_parser("determinize", help="Subset construction of a nondeterministic FSM")
    det.add_argument("fsm_file")
    det.add_argument("-o", "--output", type=str, help="Write the deterministic FSM here instead of stdout")
    det.add_argument("--dot", type=str, help="Write a DOT graph of the result here")

    seeds = commands.add_parser("seeds", help="Render fuzzer seed files covering every reachable transition")
    seeds.add_argument("fsm_file")
    seeds.add_argument("-t", "--templates", type=str, required=True, help="Directory of per-message payload files")
    seeds.add_argument("-o", "--out", type=str, required=True, help="Seed output directory")
    return parser


def load_run(args) -> RunConfig:
    config = load_config_file(args.config)

    # command-line interface parameters override the config file
    for key in ("repo", "protocol", "keyword_file", "output_dir", "backend", "fixtures"):
        value = getattr(args, key, None)
        if value:
            config[key] = value
    if getattr(args, "iterations", None):
        config["consensus"] = {**config.get("consensus", {}), "iterations": args.iterations}

    cfg = run_config_from_dict(config)
    if cfg.repo is None and args.command == "index":
        raise ConfigError("repo is required to build an index")
    return cfg


# commands


def cmd_index(cfg: RunConfig, progress=tqdm):
    pfsm = ProtocolFSM.from_config(cfg)
    index, selection = pfsm.build_index(progress=progress)
    out = Path(cfg.output_dir)
    index.save(out / INDEX_NAME)
    write_chunk_manifest(index.chunks, out / CHUNKS_NAME)
    if selection is not None:
        (out / SELECTION_NAME).write_text(dumps_document(selection.to_document()), encoding="utf-8")
        print(format_selection(selection))
    print(f"{len(index)} chunks -> {out / INDEX_NAME}")
    return index


def cmd_infer(cfg: RunConfig, index_path: str | None = None, build: bool = False, dot: bool = False, progress=tqdm):
    pfsm = ProtocolFSM.from_config(cfg)
    pfsm.gateway.check_credentials()
    out = Path(cfg.output_dir)

    index = None
    if cfg.variant.retrieval:
        if build:
            if cfg.repo is None:
                raise ConfigError("repo is required to build an index")
            index, _ = pfsm.build_index(progress=progress)
            index.save(out / INDEX_NAME)
        else:
            path = Path(resolve_path(index_path) or out / INDEX_NAME)
            if not path.is_file():
                raise ConfigError(f"no index at {path}; run `protofsm index` first or pass --build-index")
            index = pfsm.load_index(path)

    try:
        fsm, report = pfsm.infer(index, show_info=logger.info, progress=progress)
    except InferenceFailed as e:
        out.mkdir(parents=True, exist_ok=True)
        partial = {"status": "failed", "error": str(e), **e.partial_report}
        (out / REPORT_NAME).write_text(dumps_document(partial), encoding="utf-8")
        logger.error(f"partial report written to {out / REPORT_NAME}")
        raise

    save_fsm(fsm, out / FSM_NAME)
    (out / REPORT_NAME).write_text(dumps_document({"status": "ok", **report}), encoding="utf-8")
    if dot:
        (out / "fsm.dot").write_text(to_dot(fsm), encoding="utf-8")
    print(f"{len(fsm.states)} states, {len(fsm.transitions)} transitions -> {out / FSM_NAME}")
    return fsm


def cmd_eval(fsm_files: list[str], gt_file: str, output: str | None = None):
    gt = load_ground_truth(gt_file)
    reports = []
    for path in fsm_files:
        inferred = load_fsm(path)
        reports.append(evaluate(inferred, gt, inferred.implementation.repo or Path(path).stem))
    print(format_table(reports))
    if output:
        Path(output).write_text(dumps_reports(reports), encoding="utf-8")
    return reports


def cmd_diff(a_file: str, b_file: str, output: str | None = None, dot: str | None = None):
    a, b = load_fsm(a_file), load_fsm(b_file)
    d = diff(a, b)
    print(f"states: {len(a.states)} vs {len(b.states)}; transitions: {len(a.transitions)} vs {len(b.transitions)}")
    for key, value in d.summary.items():
        print(f"{key}: {value}")
    if output:
        Path(output).write_text(dumps_document(diff_to_document(d)), encoding="utf-8")
    if dot:
        Path(dot).write_text(diff_to_dot(d), encoding="utf-8")
    return d


def cmd_determinize(fsm_file: str, output: str | None = None, dot: str | None = None):
    dfa = determinize(load_fsm(fsm_file))
    if output:
        save_fsm(dfa, output)
    else:
        print(serialize(dfa), end="")
    if dot:
        Path(dot).write_text(to_dot(dfa), encoding="utf-8")
    return dfa


def cmd_seeds(fsm_file: str, templates: str, out: str):
    sequences = generate_sequences(load_fsm(fsm_file))
    written = render_seeds(sequences, load_templates(templates), out)
    print(f"{len(written)} seeds -> {out} (see {MANIFEST_NAME})")
    return written


# main


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    progress = silent if args.quiet else tqdm

    try:
        if args.command == "index":
            cmd_index(load_run(args), progress=progress)
        elif args.command == "infer":
            cmd_infer(load_run(args), args.index, args.build_index, args.dot, progress=progress)
        elif args.command == "eval":
            cmd_eval(args.fsm_files, args.ground_truth, args.output)
        elif args.command == "diff":
            cmd_diff(args.a, args.b, args.output, args.dot)
        elif args.command == "determinize":
            cmd_determinize(args.fsm_file, args.output, args.dot)
        elif args.command == "seeds":
            cmd_seeds(args.fsm_file, args.templates, args.out)
    except ProtoFsmError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 6
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
