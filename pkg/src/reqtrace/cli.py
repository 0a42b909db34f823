"""Command-line front end.

Results go to stdout and logs to stderr. Exit codes:

    0    success (``check``: Compliant)
    1    pipeline or runtime error
    2    usage or configuration error
    3    ``check``: NonCompliant
    4    ``check``: Irrelevant
    130  interrupted (the run manifest is still written)
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import RETRIEVAL_MODES, STRATEGIES, RunConfig, load_config
from .corpus import Requirement, load_requirements
from .errors import ConfigError, ReqtraceError
from .graph import export_graphml
from .labels import Label
from .pipeline import (
    BUILD_MANIFEST,
    RUN_MANIFEST,
    RunState,
    check_requirement,
    cmd_build_index,
    cmd_evaluate,
    cmd_ingest,
    cmd_report,
    inspect_index,
    load_index,
    make_gateway,
    report_manifest,
)
from .reasoner import Strategy

logger = logging.getLogger("reqtrace")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NON_COMPLIANT = 3
EXIT_IRRELEVANT = 4
EXIT_INTERRUPTED = 130

LABEL_EXIT = {Label.COMPLIANT: EXIT_OK, Label.NON_COMPLIANT: EXIT_NON_COMPLIANT, Label.IRRELEVANT: EXIT_IRRELEVANT}
_ID_RE = re.compile(r"^[\w.:-]+$")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="YAML run configuration")
    p.add_argument("-o", "--output", dest="output_dir", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="community detection seed (default: 0)")
    p.add_argument("--threshold", type=float, help="similarity threshold (default: 0.7)")
    p.add_argument("--gateway-mode", choices=("live", "record", "replay"), help="LLM gateway mode")
    p.add_argument("--cache", help="replay cache file")
    p.add_argument("--workers", type=int, help="parallel model calls")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reqtrace", description="Graph-RAG requirement compliance checking.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="clean reference documents and extract glossaries")
    _common(p)
    p.add_argument("--references", nargs="+", help="reference documents or directories")

    p = sub.add_parser("build-index", help="extract entities, build the graph, detect and report communities")
    _common(p)
    p.add_argument("--references", nargs="+", help="reference documents or directories")

    p = sub.add_parser("inspect-graph", help="print a summary of the built index as JSON")
    _common(p)
    p.add_argument("--top", type=int, default=10, help="entities to list by rank")
    p.add_argument("--graphml", help="also export the graph to this GraphML file")

    p = sub.add_parser("check", help="check one requirement (an id from the requirement set, or literal text)")
    _common(p)
    p.add_argument("requirement", help="requirement id or text")
    p.add_argument("--requirements", help="requirement set (JSON lines)")
    p.add_argument("--strategy", choices=STRATEGIES, help="reasoning strategy (default: first configured)")
    p.add_argument("--mode", choices=RETRIEVAL_MODES, help="retrieval mode (default: first configured)")
    p.add_argument("--json", action="store_true", help="print one JSON object instead of text")

    p = sub.add_parser("evaluate", help="run every configured mode, model and strategy over the requirement set")
    _common(p)
    p.add_argument("--requirements", help="requirement set (JSON lines)")
    p.add_argument("--ground-truth", dest="ground_truth", help="ground-truth CSV")
    p.add_argument("--strategies", help="comma-separated subset of io,cot,tot")
    p.add_argument("--modes", help="comma-separated subset of graph,baseline")
    p.add_argument("--models", dest="chat_models", help="comma-separated chat model names")
    p.add_argument("--sweep", action="store_true", help="also write coverage.csv over thresholds 0.50-0.95")

    p = sub.add_parser("report", help="render a report from verdict files")
    _common(p)
    p.add_argument("--verdicts", nargs="+", required=True, help="verdict JSON-lines files")
    p.add_argument("--ground-truth", dest="ground_truth", help="ground-truth CSV")
    p.add_argument("--format", choices=("markdown", "json"), default="markdown")
    p.add_argument("--out", dest="report_out", help="write here instead of stdout")
    return parser


_OVERRIDES = (
    "output_dir", "seed", "threshold", "workers", "references", "requirements", "ground_truth",
    "strategies", "modes", "chat_models",
)


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
    gateway = {}
    if args.gateway_mode:
        gateway["mode"] = args.gateway_mode
    if args.cache:
        gateway["cache_path"] = args.cache
    if gateway:
        overrides["gateway"] = gateway
    return load_config(args.config, overrides)


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING - 10 * min(verbosity, 2)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


def _resolve_requirement(cfg: RunConfig, arg: str) -> Requirement:
    if cfg.requirements and Path(cfg.requirements).exists():
        for req in load_requirements(cfg.requirements):
            if req.req_id == arg:
                return req
    if _ID_RE.match(arg):
        raise UsageError(f"unknown requirement id {arg!r}")
    return Requirement("adhoc", arg)


def _check(cfg: RunConfig, args: argparse.Namespace) -> int:
    index = load_index(cfg)
    requirement = _resolve_requirement(cfg, args.requirement)
    strategy = Strategy(args.strategy or cfg.strategies[0])
    mode = args.mode or cfg.modes[0]
    gateway = make_gateway(cfg)
    result, decision = check_requirement(cfg, index, gateway, requirement, strategy, mode)
    if args.json:
        out = decision.to_json()
        out["retrieval"] = [
            {"passage_id": i.provenance.passage_id, "similarity": i.similarity, "text": i.text} for i in result.items
        ]
        out["threshold"] = result.threshold_used
        _emit(json.dumps(out, sort_keys=True, ensure_ascii=False))
    else:
        lines = [f"Retrieved {len(result.items)} passage(s) at threshold {result.threshold_used:.2f} ({mode}):"]
        lines += [f"  {i.similarity:.4f}  {i.provenance.passage_id}  {i.text}" for i in result.items]
        lines.append(f"Label: {decision.label.value}")
        if decision.verdict is not None:
            lines.append(f"Assessment: {decision.verdict.assessment.value}")
            lines.append(f"Explanation: {decision.verdict.explanation}")
        _emit("\n".join(lines))
    return LABEL_EXIT[decision.label]


def run(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    if args.command == "check":
        return _check(cfg, args)
    if args.command == "inspect-graph":
        index = load_index(cfg)
        if args.graphml:
            export_graphml(index, args.graphml)
        _emit(json.dumps(inspect_index(index, args.top), sort_keys=True, indent=2, ensure_ascii=False))
        return EXIT_OK
    if args.command == "report":
        if not cfg.ground_truth:
            raise ConfigError("report needs --ground-truth or ground_truth in the config")
        text = cmd_report(args.verdicts, cfg.ground_truth, args.format, report_manifest(cfg, None))
        if args.report_out:
            Path(args.report_out).write_text(text, encoding="utf-8")
        else:
            _emit(text)
        return EXIT_OK

    gateway = make_gateway(cfg) if args.command != "ingest" else None
    name = {"ingest": "ingest_manifest.json", "build-index": BUILD_MANIFEST, "evaluate": RUN_MANIFEST}[args.command]
    state = RunState(cfg.out / name, args.command, gateway)
    try:
        if args.command == "ingest":
            summary = cmd_ingest(cfg, state)
            _emit(json.dumps(summary["counts"], sort_keys=True))
        elif args.command == "build-index":
            cmd_build_index(cfg, gateway, state)
            _emit(json.dumps(state.data["counts"], sort_keys=True))
        else:
            written = cmd_evaluate(cfg, gateway, state, sweep=args.sweep)
            _emit("\n".join(str(p) for _, p in sorted(written.items())))
    except KeyboardInterrupt:
        state.finish("interrupted")
        raise
    except ConfigError:
        raise
    except BaseException as exc:
        state.finish("failed", exc)
        raise
    state.finish("ok")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        return run(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReqtraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
