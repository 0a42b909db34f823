"""End-to-end stages: ingest, build the index, check one requirement, evaluate a dataset.

Each stage records what it finished in a :class:`RunState`, which is written
to the output directory on success, on failure and on interrupt, so a run that
stops half way still leaves a manifest describing its partial results.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from . import prompts
from .config import RunConfig
from .corpus import (
    Chunk,
    Document,
    DocumentKind,
    GlossaryEntry,
    Passage,
    Requirement,
    chunk,
    extract_glossary,
    load_documents,
    load_requirements,
    prepare_document,
    split_passages,
)
from .errors import ConfigError, IndexNotFound, PipelineError, ReqtraceError
from .evaluation import CellResult, Prediction, confusion, coverage_curve, curve_csv, render_report
from .extraction import (
    ExtractionConfig,
    extract_elements,
    glossary_entities,
    merge_entities,
    merge_relations,
    summarize_elements,
)
from .graph import GraphIndex, build_graph, detect_communities, load_graph, persist_graph, summarize_all
from .graph.model import recompute_ranks
from .labels import Label, LabeledPair, load_ground_truth
from .llm import ChatProvider, LLMGateway
from .reasoner import Decision, Strategy, decide, read_verdicts, write_verdicts
from .retrieval import (
    SWEEP_THRESHOLDS,
    GraphRetrievalConfig,
    RetrievalResult,
    baseline_build,
    baseline_retrieve,
    query_graph,
)

logger = logging.getLogger(__name__)

GRAPH_FILE = "graph.json"
BUILD_MANIFEST = "build_manifest.json"
RUN_MANIFEST = "run_manifest.json"
REPORT_MD = "report.md"
REPORT_JSON = "report.json"
COVERAGE_CSV = "coverage.csv"


def _json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_") or "model"


@dataclass
class RunState:
    """Progress of one command, flushed to ``<output>/<name>`` on every exit path."""

    path: Path
    command: str
    gateway: LLMGateway | None = None
    data: dict[str, Any] = field(default_factory=dict)
    completed: list[str] = field(default_factory=list)

    def done(self, step: str) -> None:
        self.completed.append(step)

    def finish(self, status: str, error: BaseException | None = None) -> None:
        out = {"command": self.command, "status": status, "completed": list(self.completed), **self.data}
        if error is not None:
            out["error"] = str(error)
            out["failed_stage"] = getattr(error, "stage", None)
        if self.gateway is not None:
            out["cost"] = self.gateway.cost_report()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(_json(out), encoding="utf-8")


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    """Re-raise failures inside the block as PipelineError carrying ``name``."""
    try:
        yield
    except PipelineError:
        raise
    except (ReqtraceError, ValueError, OSError) as exc:
        raise PipelineError(name, exc) from exc


def make_gateway(cfg: RunConfig, chat_provider: ChatProvider | None = None) -> LLMGateway:
    return LLMGateway.from_config(cfg.gateway, chat_provider)


def require(cfg: RunConfig, *names: str) -> None:
    """Check input paths before any model call."""
    for name in names:
        value = getattr(cfg, name)
        paths = value if isinstance(value, list) else [value]
        if not paths or any(p is None for p in paths):
            raise ConfigError(f"{name} is not configured")
        for p in paths:
            if not Path(p).exists():
                raise ConfigError(f"{name}: {p} does not exist")
    if cfg.gateway.mode == "replay" and not (cfg.gateway.cache_path and Path(cfg.gateway.cache_path).exists()):
        raise ConfigError("replay mode needs an existing gateway cache file")


# ---------------------------------------------------------------------------
# Ingest and index
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    documents: list[Document]
    glossary: list[GlossaryEntry]
    chunks: list[Chunk]
    passages: list[Passage]

    def counts(self) -> dict[str, int]:
        return {
            "documents": len(self.documents),
            "glossary_terms": len(self.glossary),
            "chunks": len(self.chunks),
            "passages": len(self.passages),
        }


def ingest_corpus(cfg: RunConfig) -> Corpus:
    docs = [prepare_document(d) for d in load_documents(cfg.references, DocumentKind.REFERENCE)]
    docs.sort(key=lambda d: d.doc_id)
    return Corpus(
        documents=docs,
        glossary=[e for d in docs for e in extract_glossary(d)],
        chunks=[c for d in docs for c in chunk(d, cfg.chunk_size, cfg.chunk_overlap)],
        passages=[p for d in docs for p in split_passages(d)],
    )


def cmd_ingest(cfg: RunConfig, state: RunState) -> dict[str, Any]:
    require(cfg, "references")
    with stage("ingest"):
        corpus = ingest_corpus(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    summary = {
        "counts": corpus.counts(),
        "documents": [{"doc_id": d.doc_id, "title": d.title} for d in corpus.documents],
        "glossary": [{"term": e.term, "definition": e.definition, "source_doc": e.source_doc} for e in corpus.glossary],
    }
    (cfg.out / "corpus.json").write_text(_json(summary), encoding="utf-8")
    state.data["counts"] = corpus.counts()
    state.done("ingest")
    return summary


def build_index(cfg: RunConfig, gateway: LLMGateway, state: RunState) -> GraphIndex:
    """Preprocess, extract, build the graph, detect communities and write reports."""
    with stage("ingest"):
        corpus = ingest_corpus(cfg)
    state.data["counts"] = corpus.counts()
    state.done("ingest")

    ecfg = ExtractionConfig(entity_types=tuple(cfg.entity_types), max_gleanings=cfg.max_gleanings)
    with stage("extract"), ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        results = list(pool.map(lambda c: extract_elements(c, ecfg, gateway), corpus.chunks))
    malformed = sum(r.malformed for r in results)
    state.done("extract")

    order = {c.chunk_id: (c.doc_id, c.ordinal) for c in corpus.chunks}
    with stage("summarize-elements"):
        seeded = glossary_entities(corpus.glossary, corpus.chunks, ecfg.glossary_entity_type)
        entities = merge_entities([e for r in results for e in r.entities] + seeded, order)
        relations = merge_relations([r for res in results for r in res.relations], order)
        entities, relations = summarize_elements(entities, relations, gateway, ecfg, cfg.workers)
    state.done("summarize-elements")

    with stage("graph"):
        graph = build_graph(entities, relations)
        recompute_ranks(graph)
        hierarchy = detect_communities(graph, cfg.resolution, cfg.max_levels, cfg.seed)
    state.done("graph")

    with stage("community-reports"):
        reports = summarize_all(graph, hierarchy, gateway, cfg.report_budget, cfg.workers)
    state.done("community-reports")

    metadata = {
        "reference_docs": [d.doc_id for d in corpus.documents],
        "seed": cfg.seed,
        "resolution": cfg.resolution,
        "chunk_size": cfg.chunk_size,
        "chunk_overlap": cfg.chunk_overlap,
        "entity_types": list(cfg.entity_types),
        "index_model": gateway.chat_model,
        "embedding_model": gateway.embedding_model,
        "prompt_set": prompts.version(),
    }
    index = GraphIndex(graph, hierarchy, reports, corpus.chunks, corpus.passages, metadata)
    levels = [len(hierarchy.at_level(lv)) for lv in range(hierarchy.levels)]
    state.data["counts"].update(
        {
            "entities": len(entities),
            "relations": len(relations),
            "malformed_records": malformed,
            "nodes": len(graph.nodes),
            "edges": len(graph.edges),
            "dropped_relations": graph.dropped_relations,
            "communities_per_level": levels,
            "reports": len(reports),
        }
    )
    state.data["warnings"] = [f"community {cid}: {w}" for cid in sorted(reports) for w in reports[cid].warnings]
    return index


def cmd_build_index(cfg: RunConfig, gateway: LLMGateway, state: RunState) -> GraphIndex:
    require(cfg, "references")
    index = build_index(cfg, gateway, state)
    with stage("persist"):
        cfg.out.mkdir(parents=True, exist_ok=True)
        persist_graph(index, cfg.out / GRAPH_FILE)
    state.data["graph_sha256"] = _sha256(cfg.out / GRAPH_FILE)
    state.data["config"] = cfg.to_json()
    state.done("persist")
    return index


def load_index(cfg: RunConfig) -> GraphIndex:
    path = cfg.out / GRAPH_FILE
    if not path.exists():
        raise IndexNotFound(f"no index at {path}; run build-index first")
    return load_graph(path)


def inspect_index(index: GraphIndex, top: int = 10) -> dict[str, Any]:
    g, h = index.graph, index.hierarchy
    ranked = sorted(g.nodes.values(), key=lambda n: (-n.rank, n.key))[:top]
    return {
        "nodes": len(g.nodes),
        "edges": len(g.edges),
        "dropped_relations": g.dropped_relations,
        "levels": [
            {"level": lv, "communities": len(h.at_level(lv)), "sizes": sorted((c.size for c in h.at_level(lv)), reverse=True)}
            for lv in range(h.levels)
        ],
        "top_entities": [{"key": n.key, "rank": n.rank} for n in ranked],
        "reports": [{"community_id": cid, "title": r.title} for cid, r in sorted(index.reports.items())],
        "metadata": index.metadata,
    }


# ---------------------------------------------------------------------------
# Retrieval and reasoning
# ---------------------------------------------------------------------------


class Retriever:
    """Retrieval for one mode over a built index."""

    def __init__(self, cfg: RunConfig, index: GraphIndex, mode: str, gateway: LLMGateway):
        self.cfg, self.index, self.mode, self.gateway = cfg, index, mode, gateway
        self.graph_config = GraphRetrievalConfig(community_threshold=cfg.community_threshold)
        self._dense = None
        if mode == "baseline":
            docs = set(index.metadata.get("reference_docs", ()))
            passages = [p for p in index.passages if not docs or p.doc_id in docs]
            self._dense = baseline_build(passages, gateway)

    def __call__(self, requirement: Requirement, threshold: float) -> RetrievalResult:
        if self.mode == "graph":
            return query_graph(self.index, requirement.text, threshold, self.gateway, requirement.req_id, self.graph_config)
        return baseline_retrieve(self._dense, requirement.text, self.cfg.baseline_k, self.gateway, threshold, requirement.req_id)


def check_requirement(
    cfg: RunConfig, index: GraphIndex, gateway: LLMGateway, requirement: Requirement, strategy: Strategy, mode: str
) -> tuple[RetrievalResult, Decision]:
    with stage("retrieve"):
        result = Retriever(cfg, index, mode, gateway)(requirement, cfg.threshold)
    with stage("reason"):
        decision = decide(requirement.req_id, requirement.text, result, strategy, gateway.with_model(cfg.chat_models[0]), cfg.tot_mode)
    return result, decision


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def cells_from_verdicts(rows: Sequence[Mapping[str, Any]], ground_truth: Sequence[LabeledPair]) -> list[CellResult]:
    groups: dict[tuple[str, str, str], list[Prediction]] = {}
    for row in rows:
        key = (row.get("mode", "graph"), row.get("model", "model"), row["strategy"])
        groups.setdefault(key, []).append(Prediction(row["req_id"], Label(row["label"])))
    return [CellResult(mode, model, s, confusion(preds, ground_truth)) for (mode, model, s), preds in sorted(groups.items())]


def report_manifest(cfg: RunConfig, index_sha: str | None) -> dict[str, Any]:
    return {
        "threshold": cfg.threshold,
        "seed": cfg.seed,
        "modes": list(cfg.modes),
        "strategies": [s for s in ("io", "cot", "tot") if s in cfg.strategies],
        "chat_models": list(cfg.chat_models),
        "gateway_mode": cfg.gateway.mode,
        "prompt_set": prompts.version(),
        "index_sha256": index_sha,
    }


def cmd_evaluate(cfg: RunConfig, gateway: LLMGateway, state: RunState, sweep: bool = False) -> dict[str, Path]:
    """Run every (mode, model, strategy) cell and write verdicts, reports and, with ``sweep``, coverage.csv."""
    require(cfg, "requirements", "ground_truth")
    index = load_index(cfg)
    with stage("load"):
        requirements = load_requirements(cfg.requirements)
        ground_truth = load_ground_truth(cfg.ground_truth)
    floor = min(cfg.threshold, SWEEP_THRESHOLDS[0]) if sweep else cfg.threshold
    state.data["threshold"] = cfg.threshold
    written: dict[str, Path] = {}

    runs: dict[str, dict[str, RetrievalResult]] = {}
    for mode in cfg.modes:
        with stage(f"retrieve-{mode}"):
            retriever = Retriever(cfg, index, mode, gateway)
            runs[mode] = {r.req_id: retriever(r, floor) for r in requirements}
        state.done(f"retrieve-{mode}")

    rows: list[dict[str, Any]] = []
    for mode in cfg.modes:
        for model in cfg.chat_models:
            gw = gateway.with_model(model)
            decisions: list[Decision] = []
            for s in cfg.strategies:
                strategy = Strategy(s)

                def one(req: Requirement) -> Decision:
                    return decide(req.req_id, req.text, runs[mode][req.req_id].at(cfg.threshold), strategy, gw, cfg.tot_mode)

                with stage(f"reason-{mode}-{model}-{s}"), ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                    decisions.extend(pool.map(one, requirements))
                state.done(f"{mode}/{model}/{s}")
            path = cfg.out / f"verdicts-{mode}-{_slug(model)}.jsonl"
            write_verdicts(decisions, path, extra={"mode": mode, "model": model})
            written[path.name] = path
            rows.extend(read_verdicts(path))

    with stage("report"):
        cells = cells_from_verdicts(rows, ground_truth)
        curves = None
        if sweep:
            passages = {p.passage_id: p.text for p in index.passages}
            curves = coverage_curve(runs, ground_truth, passages, SWEEP_THRESHOLDS)
            written[COVERAGE_CSV] = cfg.out / COVERAGE_CSV
            written[COVERAGE_CSV].write_text(curve_csv(curves), encoding="utf-8")
        manifest = report_manifest(cfg, _sha256(cfg.out / GRAPH_FILE))
        for name, fmt in ((REPORT_MD, "markdown"), (REPORT_JSON, "json")):
            written[name] = cfg.out / name
            written[name].write_text(render_report(cells, curves, fmt, manifest), encoding="utf-8")
    state.data["outputs"] = sorted(written)
    state.data["config"] = cfg.to_json()
    state.done("report")
    return written


def cmd_report(
    verdict_paths: Sequence[str | Path], ground_truth_path: str | Path, fmt: str = "markdown", manifest: Mapping[str, Any] | None = None
) -> str:
    rows = [row for p in verdict_paths for row in read_verdicts(p)]
    cells = cells_from_verdicts(rows, load_ground_truth(ground_truth_path))
    return render_report(cells, None, fmt, manifest)
