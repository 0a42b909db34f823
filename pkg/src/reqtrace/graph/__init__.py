"""Knowledge graph, communities, ranking and reports."""

from .leiden import Community, CommunityHierarchy, detect_communities, exact_partition, leiden, modularity
from .model import Edge, KnowledgeGraph, Node, build_graph, entity_key
from .ranking import RankedCommunity, RankingConfig, SubCommunityRanking, rank_communities, rank_subcommunities
from .reports import CommunityReport, Finding, summarize_all, summarize_community
from .store import GraphIndex, export_graphml, load_graph, persist_graph

__all__ = [
    "Community",
    "CommunityHierarchy",
    "CommunityReport",
    "Edge",
    "Finding",
    "GraphIndex",
    "KnowledgeGraph",
    "Node",
    "RankedCommunity",
    "RankingConfig",
    "SubCommunityRanking",
    "build_graph",
    "detect_communities",
    "entity_key",
    "exact_partition",
    "export_graphml",
    "leiden",
    "load_graph",
    "modularity",
    "persist_graph",
    "rank_communities",
    "rank_subcommunities",
    "summarize_all",
    "summarize_community",
]
