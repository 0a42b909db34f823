"""Versioned JSON persistence of a built index, plus GraphML export."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import networkx as nx

from ..corpus import Chunk, Passage
from ..errors import GraphFormatError, SchemaVersionMismatch
from .leiden import Community, CommunityHierarchy
from .model import Edge, KnowledgeGraph, Node
from .reports import CommunityReport

SCHEMA_VERSION = 1


@dataclass
class GraphIndex:
    """Everything retrieval needs: graph, communities, reports and source text."""

    graph: KnowledgeGraph
    hierarchy: CommunityHierarchy
    reports: dict[int, CommunityReport] = field(default_factory=dict)
    chunks: list[Chunk] = field(default_factory=list)
    passages: list[Passage] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def summaries(self) -> dict[int, str]:
        return {cid: r.summary for cid, r in self.reports.items()}


def _dump(index: GraphIndex) -> dict[str, Any]:
    g = index.graph
    return {
        "schema_version": SCHEMA_VERSION,
        "metadata": index.metadata,
        "nodes": [
            {
                "key": n.key,
                "name": n.name,
                "entity_type": n.entity_type,
                "description": n.description,
                "source_chunks": list(n.source_chunks),
                "rank": n.rank,
            }
            for n in (g.nodes[k] for k in sorted(g.nodes))
        ],
        "edges": [
            {
                "source": e.source,
                "target": e.target,
                "weight": e.weight,
                "description": e.description,
                "directed_hint": list(e.directed_hint) if e.directed_hint else None,
                "source_chunks": list(e.source_chunks),
            }
            for e in (g.edges[p] for p in sorted(g.edges))
        ],
        "dropped_relations": g.dropped_relations,
        "communities": [
            {"community_id": c.community_id, "level": c.level, "members": sorted(c.members), "parent": c.parent}
            for c in sorted(index.hierarchy.communities, key=lambda c: c.community_id)
        ],
        "reports": [index.reports[cid].to_json() for cid in sorted(index.reports)],
        "chunks": [
            {
                "chunk_id": c.chunk_id,
                "doc_id": c.doc_id,
                "ordinal": c.ordinal,
                "text": c.text,
                "token_count": c.token_count,
                "char_span": list(c.char_span),
            }
            for c in index.chunks
        ],
        "passages": [
            {"passage_id": p.passage_id, "doc_id": p.doc_id, "text": p.text, "char_span": list(p.char_span)}
            for p in index.passages
        ],
    }


def dumps(index: GraphIndex) -> str:
    return json.dumps(_dump(index), sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def persist_graph(index: GraphIndex, path: str | Path) -> None:
    """Write atomically: a crash never leaves a half-written dump behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(dumps(index))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def loads(text: str) -> GraphIndex:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"graph dump is not valid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise GraphFormatError("graph dump is not a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"schema version {version!r}, expected {SCHEMA_VERSION}")
    try:
        graph = KnowledgeGraph(dropped_relations=int(data.get("dropped_relations", 0)))
        for n in data["nodes"]:
            graph.nodes[n["key"]] = Node(
                n["key"], n["name"], n["entity_type"], n["description"], tuple(n["source_chunks"]), int(n["rank"])
            )
        for e in data["edges"]:
            hint = tuple(e["directed_hint"]) if e.get("directed_hint") else None
            edge = Edge(e["source"], e["target"], float(e["weight"]), e["description"], hint, tuple(e["source_chunks"]))
            graph.edges[edge.pair] = edge
        hierarchy = CommunityHierarchy(
            tuple(
                Community(int(c["community_id"]), int(c["level"]), frozenset(c["members"]), c.get("parent"))
                for c in data["communities"]
            )
        )
        reports = {int(r["community_id"]): CommunityReport.from_json(r) for r in data["reports"]}
        chunks = [
            Chunk(c["chunk_id"], c["doc_id"], int(c["ordinal"]), c["text"], int(c["token_count"]), tuple(c["char_span"]))
            for c in data["chunks"]
        ]
        passages = [Passage(p["passage_id"], p["doc_id"], p["text"], tuple(p["char_span"])) for p in data["passages"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"graph dump is malformed: {exc!r}") from exc
    _check(graph, hierarchy)
    return GraphIndex(graph, hierarchy, reports, chunks, passages, dict(data.get("metadata") or {}))


def _check(graph: KnowledgeGraph, hierarchy: CommunityHierarchy) -> None:
    for a, b in graph.edges:
        if a not in graph.nodes or b not in graph.nodes or a == b:
            raise GraphFormatError(f"edge {a!r}-{b!r} has an invalid endpoint")
    for level in range(hierarchy.levels):
        seen: list[str] = [m for c in hierarchy.at_level(level) for m in c.members]
        if len(seen) != len(set(seen)) or set(seen) != set(graph.nodes):
            raise GraphFormatError(f"communities at level {level} do not partition the nodes")


def load_graph(path: str | Path) -> GraphIndex:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise GraphFormatError(f"{path} is not UTF-8 text") from exc
    return loads(text)


def export_graphml(index: GraphIndex, path: str | Path) -> None:
    """GraphML for external viewers; node attributes include level-0 community."""
    g = nx.Graph()
    level0 = index.hierarchy.membership(0) if index.hierarchy.communities else {}
    for key in sorted(index.graph.nodes):
        n = index.graph.nodes[key]
        g.add_node(
            key,
            name=n.name,
            entity_type=n.entity_type,
            description=n.description,
            rank=n.rank,
            community=level0.get(key, -1),
        )
    for pair in sorted(index.graph.edges):
        e = index.graph.edges[pair]
        hint = "->".join(e.directed_hint) if e.directed_hint else ""
        g.add_edge(e.source, e.target, weight=e.weight, description=e.description, directed_hint=hint)
    nx.write_graphml(g, str(path))
