"""Graph-guided and dense baseline retrieval of reference passages, and coverage."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import Document, DocumentKind, Passage, query_terms, split_passages
from .errors import EmptyIndex
from .graph import Community, GraphIndex, RankingConfig, rank_communities
from .labels import LabeledPair
from .llm import EmbeddingVector, LLMGateway
from .vectors import cosine_similarity

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.7
SWEEP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# Similarities are rounded so float noise cannot flip a value sitting exactly
# on a threshold.
SIMILARITY_DIGITS = 12

__all__ = [
    "DEFAULT_THRESHOLD",
    "SWEEP_THRESHOLDS",
    "CoverageResult",
    "DenseEntry",
    "DenseIndex",
    "GraphRetrievalConfig",
    "Provenance",
    "RetrievalItem",
    "RetrievalResult",
    "baseline_build",
    "baseline_retrieve",
    "concatenate_items",
    "cosine_similarity",
    "coverage",
    "normalize_for_match",
    "query_graph",
    "select_communities",
]


@dataclass(frozen=True)
class Provenance:
    passage_id: str
    doc_id: str
    chunk_ids: tuple[str, ...] = ()
    entity_keys: tuple[str, ...] = ()
    community_id: int | None = None

    @property
    def key(self) -> str:
        return self.passage_id


@dataclass(frozen=True)
class RetrievalItem:
    text: str
    similarity: float
    provenance: Provenance

    def __post_init__(self):
        if not -1.0 <= self.similarity <= 1.0:
            raise ValueError(f"similarity {self.similarity} outside [-1, 1]")


@dataclass(frozen=True)
class RetrievalResult:
    query_req_id: str
    items: tuple[RetrievalItem, ...]
    threshold_used: float

    def at(self, threshold: float) -> RetrievalResult:
        """The same result restricted to a stricter threshold."""
        if threshold < self.threshold_used:
            raise ValueError("cannot relax a threshold after retrieval")
        return RetrievalResult(
            self.query_req_id, tuple(i for i in self.items if i.similarity >= threshold), threshold
        )


def _score(u: EmbeddingVector, v: EmbeddingVector) -> float:
    return round(cosine_similarity(u, v), SIMILARITY_DIGITS)


def _sorted(items: Iterable[RetrievalItem]) -> tuple[RetrievalItem, ...]:
    return tuple(sorted(items, key=lambda i: (-i.similarity, i.provenance.key)))


def _check_threshold(threshold: float) -> None:
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [-1, 1]")


# ---------------------------------------------------------------------------
# Graph retrieval
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphRetrievalConfig:
    """Community gate used while walking the hierarchy.

    The gate is independent of the passage threshold, so the candidate set is
    fixed per query and raising the passage threshold can only remove items.
    ``min_selected`` keeps the top-ranked communities of a level even when none
    clear ``community_threshold``; the passage threshold remains the filter
    that decides relevance.
    """

    community_threshold: float = 0.2
    min_selected: int = 1
    ranking: RankingConfig = field(default_factory=RankingConfig)


def select_communities(
    index: GraphIndex, terms: Sequence[str], gateway: LLMGateway, config: GraphRetrievalConfig
) -> list[Community]:
    """Walk the hierarchy top-down and return the selected communities."""
    h, summaries = index.hierarchy, index.summaries()

    def choose(siblings: list[Community], parent: int | None) -> list[Community]:
        ranking = rank_communities(
            siblings, index.graph, terms, config.community_threshold, gateway, summaries, config.ranking, parent
        )
        ids = [e.community_id for e in ranking.passing()]
        if len(ids) < config.min_selected:
            ids = ranking.order[: max(config.min_selected, len(ids))]
        return [h.get(cid) for cid in ids]

    selected: list[Community] = []
    stack = choose(h.at_level(0), None)
    while stack:
        current = stack.pop(0)
        if not h.is_split(current.community_id):
            selected.append(current)
            continue
        chosen = choose(h.children(current.community_id), current.community_id)
        stack = chosen + stack
    return selected


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def graph_candidates(index: GraphIndex, communities: Sequence[Community]) -> list[tuple[Passage, Provenance]]:
    """Reference passages overlapping the chunks of the communities' entities."""
    chunks = {c.chunk_id: c for c in index.chunks}
    reference_docs = set(index.metadata.get("reference_docs", ())) or None
    by_doc: dict[str, list[Passage]] = {}
    for p in index.passages:
        if reference_docs is None or p.doc_id in reference_docs:
            by_doc.setdefault(p.doc_id, []).append(p)
    found: dict[str, dict] = {}
    for community in communities:
        for key in sorted(community.members):
            for chunk_id in index.graph.nodes[key].source_chunks:
                ch = chunks.get(chunk_id)
                if ch is None:
                    continue
                for p in by_doc.get(ch.doc_id, ()):
                    if not _overlaps(p.char_span, ch.char_span):
                        continue
                    slot = found.setdefault(
                        p.passage_id, {"passage": p, "chunks": set(), "keys": set(), "community": community.community_id}
                    )
                    slot["chunks"].add(chunk_id)
                    slot["keys"].add(key)
    out = []
    for pid in sorted(found):
        slot = found[pid]
        p = slot["passage"]
        out.append((p, Provenance(pid, p.doc_id, tuple(sorted(slot["chunks"])), tuple(sorted(slot["keys"])), slot["community"])))
    return out


def query_graph(
    index: GraphIndex,
    requirement_text: str,
    threshold: float,
    gateway: LLMGateway,
    req_id: str = "",
    config: GraphRetrievalConfig = GraphRetrievalConfig(),
) -> RetrievalResult:
    """Score reference passages reachable from the selected communities."""
    _check_threshold(threshold)
    if not index.graph.nodes or not index.passages or not index.hierarchy.communities:
        raise EmptyIndex("graph index has no nodes or passages")
    communities = select_communities(index, query_terms(requirement_text), gateway, config)
    candidates = graph_candidates(index, communities)
    if not candidates:
        return RetrievalResult(req_id, (), threshold)
    vectors = gateway.embed([requirement_text] + [p.text for p, _ in candidates], tag="retrieve")
    items = []
    for (p, prov), vec in zip(candidates, vectors[1:]):
        sim = _score(vectors[0], vec)
        if sim >= threshold:
            items.append(RetrievalItem(p.text, sim, prov))
    return RetrievalResult(req_id, _sorted(items), threshold)


# ---------------------------------------------------------------------------
# Dense baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseEntry:
    ordinal: int
    passage: Passage
    embedding: EmbeddingVector


@dataclass(frozen=True)
class DenseIndex:
    entries: tuple[DenseEntry, ...]
    dimension: int

    def __post_init__(self):
        for e in self.entries:
            if e.embedding.dimension != self.dimension:
                raise ValueError("dense index embeddings must share one dimension")


def baseline_build(sources: Sequence[Document | Passage], gateway: LLMGateway) -> DenseIndex:
    """Embed reference passages. Documents are split into passages first."""
    passages: list[Passage] = []
    for s in sources:
        if isinstance(s, Document):
            if s.kind is not DocumentKind.REFERENCE:
                raise ValueError(f"{s.doc_id} is not a reference document")
            passages.extend(split_passages(s))
        else:
            passages.append(s)
    if not passages:
        raise EmptyIndex("no passages to index")
    vectors = gateway.embed([p.text for p in passages], tag="baseline-index")
    entries = tuple(DenseEntry(i, p, v) for i, (p, v) in enumerate(zip(passages, vectors)))
    return DenseIndex(entries, vectors[0].dimension)


def baseline_retrieve(
    index: DenseIndex,
    query: str,
    k: int,
    gateway: LLMGateway,
    threshold: float = -1.0,
    req_id: str = "",
) -> RetrievalResult:
    """Top-``k`` passages by cosine similarity; ties go to the lower entry ordinal."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_threshold(threshold)
    if not index.entries:
        raise EmptyIndex("dense index is empty")
    [qv] = gateway.embed([query], tag="retrieve")
    scored = sorted(((_score(qv, e.embedding), e.ordinal, e) for e in index.entries), key=lambda t: (-t[0], t[1]))
    items = [
        RetrievalItem(e.passage.text, sim, Provenance(e.passage.passage_id, e.passage.doc_id))
        for sim, _, e in scored[:k]
        if sim >= threshold
    ]
    return RetrievalResult(req_id, tuple(items), threshold)


def concatenate_items(items: Sequence[RetrievalItem]) -> str:
    """Reference text handed to the reasoner: items in similarity order with labeled dividers."""
    if len(items) == 1:
        return items[0].text
    parts = []
    for n, item in enumerate(items, 1):
        parts.append(f"--- Reference {n} ({item.provenance.passage_id}, similarity {item.similarity:.2f}) ---")
        parts.append(item.text)
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Coverage
# ---------------------------------------------------------------------------

_WS_RE = re.compile(r"\s+")


def normalize_for_match(text: str) -> str:
    return _WS_RE.sub(" ", text).strip().lower()


@dataclass(frozen=True)
class CoverageResult:
    threshold: float
    matched: int
    total: int
    per_requirement: Mapping[str, tuple[int, int]]

    @property
    def value(self) -> float:
        return self.matched / self.total if self.total else 0.0


def coverage(
    results: Mapping[str, RetrievalResult],
    ground_truth: Iterable[LabeledPair],
    passages: Mapping[str, str],
    threshold: float,
) -> CoverageResult:
    """Share of ground-truth reference passages exactly matched by retrieval.

    ``passages`` maps passage id to text; a ground-truth reference id that is
    not a known passage id is taken to be the passage text itself. Rows without
    a reference (pure Irrelevant rows) do not count.
    """
    per: dict[str, list[int]] = {}
    for pair in ground_truth:
        if not pair.reference_id:
            continue
        expected = normalize_for_match(passages.get(pair.reference_id, pair.reference_id))
        result = results.get(pair.req_id)
        got = set()
        if result is not None:
            got = {normalize_for_match(i.text) for i in result.at(max(threshold, result.threshold_used)).items}
        slot = per.setdefault(pair.req_id, [0, 0])
        slot[1] += 1
        slot[0] += expected in got
    matched = sum(v[0] for v in per.values())
    total = sum(v[1] for v in per.values())
    return CoverageResult(threshold, matched, total, {k: (v[0], v[1]) for k, v in sorted(per.items())})
