"""Knowledge-graph data model and construction from extracted records."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..extraction import EntityRecord, RelationRecord

logger = logging.getLogger(__name__)


def entity_key(name: str, entity_type: str) -> str:
    return f"{name}|{entity_type}"


@dataclass(frozen=True)
class Node:
    key: str
    name: str
    entity_type: str
    description: str
    source_chunks: tuple[str, ...]
    rank: int = 0


@dataclass(frozen=True)
class Edge:
    """Undirected weighted edge. ``source < target`` by key ordering."""

    source: str
    target: str
    weight: float
    description: str
    directed_hint: tuple[str, str] | None = None
    source_chunks: tuple[str, ...] = ()

    @property
    def pair(self) -> tuple[str, str]:
        return (self.source, self.target)


@dataclass
class KnowledgeGraph:
    nodes: dict[str, Node] = field(default_factory=dict)
    edges: dict[tuple[str, str], Edge] = field(default_factory=dict)
    dropped_relations: int = 0

    def neighbors(self) -> dict[str, dict[str, float]]:
        adj: dict[str, dict[str, float]] = {k: {} for k in self.nodes}
        for (a, b), e in self.edges.items():
            adj[a][b] = e.weight
            adj[b][a] = e.weight
        return adj

    def subgraph_edges(self, members: Iterable[str]) -> list[Edge]:
        members = set(members)
        return [e for (a, b), e in self.edges.items() if a in members and b in members]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges


def build_graph(entities: Sequence[EntityRecord], relations: Sequence[RelationRecord]) -> KnowledgeGraph:
    """Build the homogeneous undirected weighted graph.

    Parallel relations between the same unordered pair collapse into one edge
    whose weight is the sum of their strengths; the first relation's
    (source, target) is kept as ``directed_hint``. Relations naming an unknown
    entity are dropped and counted in ``dropped_relations``. When one name is
    shared by several entity types, relations attach to the first key in sort
    order.
    """
    graph = KnowledgeGraph()
    by_name: dict[str, str] = {}
    for e in entities:
        key = entity_key(e.name, e.entity_type)
        if key in graph.nodes:
            raise ValueError(f"duplicate entity {key!r}; merge entities before building the graph")
        graph.nodes[key] = Node(key, e.name, e.entity_type, e.description, tuple(sorted(e.source_chunks)))
    for key in sorted(graph.nodes):
        by_name.setdefault(graph.nodes[key].name, key)

    acc: dict[tuple[str, str], dict] = {}
    for r in relations:
        a, b = by_name.get(r.source.upper()), by_name.get(r.target.upper())
        if a is None or b is None or a == b:
            graph.dropped_relations += 1
            continue
        pair = (a, b) if a < b else (b, a)
        slot = acc.setdefault(pair, {"weight": 0.0, "descriptions": [], "hint": (a, b), "chunks": set()})
        slot["weight"] += float(r.strength)
        if r.description and r.description not in slot["descriptions"]:
            slot["descriptions"].append(r.description)
        slot["chunks"].update(r.source_chunks)
    if graph.dropped_relations:
        logger.warning("dropped %d relation(s) with unknown endpoints", graph.dropped_relations)

    for pair in sorted(acc):
        slot = acc[pair]
        graph.edges[pair] = Edge(
            pair[0],
            pair[1],
            slot["weight"],
            "\n".join(slot["descriptions"]),
            slot["hint"],
            tuple(sorted(slot["chunks"])),
        )
    recompute_ranks(graph)
    return graph


def recompute_ranks(graph: KnowledgeGraph) -> None:
    degree = {k: 0 for k in graph.nodes}
    for a, b in graph.edges:
        degree[a] += 1
        degree[b] += 1
    for k, node in graph.nodes.items():
        if node.rank != degree[k]:
            graph.nodes[k] = Node(node.key, node.name, node.entity_type, node.description, node.source_chunks, degree[k])
