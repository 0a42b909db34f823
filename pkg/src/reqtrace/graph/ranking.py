"""Static and query-dependent ranking of sub-communities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ..corpus import query_terms as content_terms
from ..llm import LLMGateway
from ..vectors import cosine_similarity
from .leiden import Community, CommunityHierarchy
from .model import KnowledgeGraph

DEFAULT_TYPE_PRIORS = {"Standard": 1.0, "Article": 0.8, "Requirement": 0.5}


@dataclass(frozen=True)
class RankingConfig:
    static_weight: float = 0.5
    dynamic_weight: float = 0.5
    type_priors: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_TYPE_PRIORS))
    default_prior: float = 0.5

    @property
    def demotion(self) -> float:
        # larger than the spread of any blend, so demoted children sort last
        return 2.0 * (abs(self.static_weight) + abs(self.dynamic_weight)) + 1.0


@dataclass(frozen=True)
class RankedCommunity:
    community_id: int
    static_score: float
    dynamic_score: float
    final_score: float
    passes: bool


@dataclass(frozen=True)
class SubCommunityRanking:
    parent_id: int | None
    entries: tuple[RankedCommunity, ...]

    @property
    def order(self) -> list[int]:
        return [e.community_id for e in self.entries]

    def passing(self) -> list[RankedCommunity]:
        return [e for e in self.entries if e.passes]


def static_scores(
    communities: Sequence[Community], graph: KnowledgeGraph, config: RankingConfig = RankingConfig()
) -> dict[int, float]:
    """Mean of normalized degree mass and mean entity-type prior, per community."""
    mass = {c.community_id: sum(graph.nodes[m].rank for m in c.members) for c in communities}
    top = max(mass.values(), default=0)
    out = {}
    for c in communities:
        norm = mass[c.community_id] / top if top > 0 else 0.0
        prior = sum(config.type_priors.get(graph.nodes[m].entity_type, config.default_prior) for m in c.members)
        out[c.community_id] = (norm + prior / len(c.members)) / 2.0
    return out


def community_text(community: Community, graph: KnowledgeGraph, summaries: Mapping[int, str]) -> str:
    text = summaries.get(community.community_id, "")
    if text.strip():
        return text
    return " ".join(graph.nodes[m].name for m in sorted(community.members))


def rank_communities(
    communities: Sequence[Community],
    graph: KnowledgeGraph,
    query_terms: Sequence[str],
    threshold: float,
    gateway: LLMGateway | None,
    summaries: Mapping[int, str] | None = None,
    config: RankingConfig = RankingConfig(),
    parent_id: int | None = None,
) -> SubCommunityRanking:
    """Rank sibling communities against a query.

    ``final = static_weight * static + dynamic_weight * dynamic``. Children
    whose dynamic score falls below ``threshold`` stay in the list but their
    final score is shifted down by a constant so that they sort after every
    passing child. With no query terms the dynamic term is zero and every child
    is demoted equally, which leaves the static order intact.
    """
    summaries = summaries or {}
    statics = static_scores(communities, graph, config)
    dynamics = {c.community_id: 0.0 for c in communities}
    terms = [t for t in query_terms if t.strip()]
    if terms and communities:
        if gateway is None:
            raise ValueError("a gateway is needed to embed a non-empty query")
        texts = [" ".join(terms)]
        texts += [" ".join(content_terms(community_text(c, graph, summaries))) or "-" for c in communities]
        vectors = gateway.embed(texts, tag="rank")
        for c, vec in zip(communities, vectors[1:]):
            dynamics[c.community_id] = cosine_similarity(vectors[0], vec)
    entries = []
    for c in communities:
        cid = c.community_id
        blend = config.static_weight * statics[cid] + config.dynamic_weight * dynamics[cid]
        passes = bool(terms) and dynamics[cid] >= threshold
        entries.append(RankedCommunity(cid, statics[cid], dynamics[cid], blend if passes else blend - config.demotion, passes))
    entries.sort(key=lambda e: (-e.final_score, e.community_id))
    return SubCommunityRanking(parent_id, tuple(entries))


def rank_subcommunities(
    hierarchy: CommunityHierarchy,
    parent_id: int,
    graph: KnowledgeGraph,
    query_terms: Sequence[str],
    threshold: float,
    gateway: LLMGateway | None = None,
    summaries: Mapping[int, str] | None = None,
    config: RankingConfig = RankingConfig(),
) -> SubCommunityRanking:
    children = hierarchy.children(parent_id)
    if not children:
        raise ValueError(f"community {parent_id} has no children")
    return rank_communities(children, graph, query_terms, threshold, gateway, summaries, config, parent_id)
