import json
import math

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graph_oracle import (
    ISOLATED3,
    K4,
    NAMED_FIXTURES,
    TWO_TRIANGLES,
    graph_from_edges,
    level0_modularity,
    nx_view,
    oracle_best,
)

from reqtrace.corpus import Chunk, Passage
from reqtrace.errors import GraphFormatError, LlmProtocolError, SchemaVersionMismatch
from reqtrace.extraction import EntityRecord, RelationRecord
from reqtrace.graph import (
    Community,
    CommunityHierarchy,
    GraphIndex,
    KnowledgeGraph,
    RankingConfig,
    build_graph,
    detect_communities,
    export_graphml,
    leiden,
    load_graph,
    persist_graph,
    rank_subcommunities,
    summarize_all,
    summarize_community,
)
from reqtrace.llm import HashingEmbedder, LLMGateway, ScriptedChat, ScriptedEmbedder

# -- build_graph --------------------------------------------------------------------


def test_build_fig6_pair():
    ents = [EntityRecord("ARTICLE 1", "Article", "broker duties"), EntityRecord("ARTICLE 25", "Article", "online brokers")]
    rels = [RelationRecord("ARTICLE 25", "ARTICLE 1", "adds mandates", 8)]
    g = build_graph(ents, rels)
    assert len(g.edges) == 1
    [edge] = g.edges.values()
    assert edge.weight == 8
    assert edge.directed_hint == ("ARTICLE 25|Article", "ARTICLE 1|Article")
    assert {n.rank for n in g.nodes.values()} == {1}


def test_build_aggregates_both_directions():
    ents = [EntityRecord("A", "Article", ""), EntityRecord("B", "Article", "")]
    g = build_graph(ents, [RelationRecord("A", "B", "x", 3), RelationRecord("B", "A", "y", 4)])
    [edge] = g.edges.values()
    assert edge.weight == 7
    assert edge.directed_hint == ("A|Article", "B|Article")
    assert edge.description == "x\ny"


def test_build_drops_dangling_relation(caplog):
    ents = [EntityRecord("A", "Article", "")]
    g = build_graph(ents, [RelationRecord("A", "GHOST", "x", 3)])
    assert g.dropped_relations == 1
    assert not g.edges
    assert "dropped 1 relation" in caplog.text


def test_build_rejects_unmerged_duplicates():
    with pytest.raises(ValueError):
        build_graph([EntityRecord("A", "Article", ""), EntityRecord("A", "Article", "again")], [])


_names = st.sampled_from([f"E{i}" for i in range(8)])


@settings(max_examples=150, deadline=None)
@given(
    st.sets(_names, min_size=1),
    st.lists(st.tuples(_names, _names, st.integers(1, 10)), max_size=25),
    st.integers(0, 3),
)
def test_graph_and_hierarchy_invariants(names, rels, seed):
    ents = [EntityRecord(n, "Article", n.lower()) for n in sorted(names)]
    relations = [RelationRecord(a, b, "r", w) for a, b, w in rels if a != b]
    g = build_graph(ents, relations)
    # degree/rank consistency, no self loops, one edge per pair, positive weights
    assert sum(n.rank for n in g.nodes.values()) == 2 * len(g.edges)
    for (a, b), e in g.edges.items():
        assert a < b and a in g.nodes and b in g.nodes and e.weight > 0
    h = detect_communities(g, seed=seed)
    for level in range(h.levels):
        members = [m for c in h.at_level(level) for m in c.members]
        assert sorted(members) == sorted(g.nodes)
    for c in h.communities:
        if c.parent is not None:
            assert c.members <= h.get(c.parent).members
    assert detect_communities(g, seed=seed) == h
    assert level0_modularity(g, h) >= oracle_best(nx_view(g)) - 1e-9


# -- community detection ------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(NAMED_FIXTURES))
def test_level0_matches_bruteforce_optimum(name):
    g = graph_from_edges(*NAMED_FIXTURES[name])
    h = detect_communities(g)
    assert abs(level0_modularity(g, h) - oracle_best(nx_view(g))) <= 1e-9


@pytest.mark.parametrize("name", ["two-triangles", "k4", "isolated3", "fig6-pair", "path5"])
def test_heuristic_path_on_named_fixtures(name):
    n, edges = NAMED_FIXTURES[name]
    adj = [dict() for _ in range(n)]
    for a, b, w in edges:
        adj[a][b] = adj[b][a] = float(w)
    labels = leiden(adj, exact_max_nodes=0)
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_weighted_edges_from(edges)
    parts = [{i for i in range(n) if labels[i] == c} for c in set(labels)]
    q = nx.community.modularity(g, parts) if edges else 0.0
    assert abs(q - oracle_best(g)) <= 1e-9


def test_two_triangles_give_two_communities():
    h = detect_communities(graph_from_edges(*TWO_TRIANGLES))
    assert sorted(c.size for c in h.at_level(0)) == [3, 3]


def test_k4_is_one_community():
    h = detect_communities(graph_from_edges(*K4))
    assert [c.size for c in h.at_level(0)] == [4]


def test_isolated_nodes_are_singletons():
    h = detect_communities(graph_from_edges(*ISOLATED3))
    assert sorted(c.size for c in h.at_level(0)) == [1, 1, 1]
    h2 = detect_communities(graph_from_edges(*NAMED_FIXTURES["triangle-plus-isolated"]))
    assert sorted(c.size for c in h2.at_level(0)) == [1, 3]


def test_leiden_on_planted_partition():
    g = nx.planted_partition_graph(5, 20, 0.4, 0.01, seed=3)
    adj = [{u: 1.0 for u in g[v]} for v in range(g.number_of_nodes())]
    labels = leiden(adj, seed=0)
    found = {frozenset(i for i in range(100) if labels[i] == c) for c in set(labels)}
    planted = {frozenset(range(k * 20, (k + 1) * 20)) for k in range(5)}
    assert found == planted
    assert leiden(adj, seed=0) == labels


def test_hierarchy_splits_below_resolution_limit():
    # Ten copies of two bridged triangles. Globally each copy is one community
    # (merging beats splitting once m is large); on its own a copy splits.
    edges = []
    for k in range(10):
        b = 6 * k
        edges += [(b + x, b + y, w) for x, y, w in TWO_TRIANGLES[1]]
    g = graph_from_edges(60, edges)
    h = detect_communities(g, max_levels=3)
    assert h.levels == 2
    assert sorted(c.size for c in h.at_level(0)) == [6] * 10
    assert sorted(c.size for c in h.at_level(1)) == [3] * 20
    for c in h.at_level(0):
        assert h.is_split(c.community_id)
        assert all(k.members <= c.members for k in h.children(c.community_id))


def test_detect_rejects_empty_graph():
    with pytest.raises(ValueError):
        detect_communities(KnowledgeGraph())


# -- sub-community ranking ----------------------------------------------------------


def _ranking_fixture():
    ents = [
        EntityRecord("A", "Standard", ""),
        EntityRecord("B", "Article", ""),
        EntityRecord("C", "Article", ""),
        EntityRecord("D", "Requirement", ""),
        EntityRecord("E", "Requirement", ""),
    ]
    rels = [RelationRecord(a, b, "r", 1) for a, b in [("A", "B"), ("A", "C"), ("B", "C"), ("C", "D"), ("D", "E")]]
    g = build_graph(ents, rels)
    h = CommunityHierarchy(
        (
            Community(0, 0, frozenset(g.nodes)),
            Community(1, 1, frozenset({"A|Standard", "B|Article"}), 0),
            Community(2, 1, frozenset({"C|Article"}), 0),
            Community(3, 1, frozenset({"D|Requirement", "E|Requirement"}), 0),
        )
    )
    summaries = {1: "alpha", 2: "beta", 3: "gamma"}
    table = {
        "query": [1.0, 0.0, 0.0],
        "alpha": [0.6, 0.8, 0.0],
        "beta": [0.9, math.sqrt(0.19), 0.0],
        "gamma": [0.8, 0.0, 0.6],
    }
    gw = LLMGateway("live", embedding_provider=ScriptedEmbedder(table))
    return g, h, summaries, gw


def test_ranking_static_order_for_empty_query():
    g, h, summaries, gw = _ranking_fixture()
    r = rank_subcommunities(h, 0, g, [], 0.7, gw, summaries)
    # static = (degree mass / max mass + mean type prior) / 2, computed by hand
    assert [e.community_id for e in r.entries] == [1, 2, 3]
    assert [round(e.static_score, 6) for e in r.entries] == [0.95, 0.775, 0.625]
    assert all(e.dynamic_score == 0 for e in r.entries)


def test_ranking_hand_computed_blend():
    g, h, summaries, gw = _ranking_fixture()
    open_ = rank_subcommunities(h, 0, g, ["query"], 0.0, gw, summaries)
    # blends: 1 -> 0.5*0.95+0.5*0.6 = 0.775; 2 -> 0.5*0.775+0.5*0.9 = 0.8375; 3 -> 0.5*0.625+0.5*0.8 = 0.7125
    assert open_.order == [2, 1, 3]
    assert [round(e.final_score, 6) for e in open_.entries] == [0.8375, 0.775, 0.7125]
    strict = rank_subcommunities(h, 0, g, ["query"], 0.7, gw, summaries)
    # community 1 (dynamic 0.6) drops below the passing children but stays listed
    assert strict.order == [2, 3, 1]
    assert [e.passes for e in strict.entries] == [True, True, False]


def test_ranking_self_similarity_wins():
    g, h, _, _ = _ranking_fixture()
    summaries = {1: "broker account duties", 2: "watchdog timer reset", 3: "clock skew tolerance between channels"}
    gw = LLMGateway("live", embedding_provider=HashingEmbedder(256))
    r = rank_subcommunities(h, 0, g, summaries[3].split(), 0.7, gw, summaries)
    assert r.order[0] == 3
    assert r.entries[0].dynamic_score == pytest.approx(1.0)


def test_ranking_total_order_and_weights():
    g, h, summaries, gw = _ranking_fixture()
    cfg = RankingConfig(static_weight=0.0, dynamic_weight=1.0)
    r = rank_subcommunities(h, 0, g, ["query"], 0.0, gw, summaries, cfg)
    assert r.order == [2, 3, 1]
    scores = [e.final_score for e in r.entries]
    assert scores == sorted(scores, reverse=True)
    assert len(set(r.order)) == 3


def test_ranking_requires_children():
    g, h, summaries, gw = _ranking_fixture()
    with pytest.raises(ValueError):
        rank_subcommunities(h, 2, g, [], 0.7, gw, summaries)


# -- community reports --------------------------------------------------------------


def _report_json(rating=7.5, findings=5, title="Broker duties"):
    return json.dumps(
        {
            "title": title,
            "summary": "Articles defining broker obligations.",
            "rating": rating,
            "rating_explanation": "Core obligations.",
            "findings": [{"summary": f"f{i}", "explanation": f"e{i}"} for i in range(findings)],
        }
    )


def _small_community():
    g = graph_from_edges(*NAMED_FIXTURES["fig6-pair"])
    h = detect_communities(g)
    return g, h, h.at_level(0)[0]


def test_report_parsed():
    g, h, c = _small_community()
    gw = LLMGateway("live", chat_provider=ScriptedChat(["Here you go:\n" + _report_json(findings=2)]))
    r = summarize_community(c, g, h, gw)
    assert r.title == "Broker duties"
    assert r.impact_severity == 7.5
    assert len(r.findings) == 2
    assert not r.warnings


def test_report_severity_clamped():
    g, h, c = _small_community()
    gw = LLMGateway("live", chat_provider=ScriptedChat([_report_json(rating=12)]))
    r = summarize_community(c, g, h, gw)
    assert r.impact_severity == 10
    assert any("clamped" in w for w in r.warnings)


@settings(max_examples=60, deadline=None)
@given(st.one_of(st.floats(allow_nan=False, allow_infinity=True), st.integers(-1000, 1000)))
def test_report_severity_always_in_range(rating):
    g, h, c = _small_community()
    gw = LLMGateway("live", chat_provider=ScriptedChat([_report_json(rating=rating)]))
    r = summarize_community(c, g, h, gw)
    assert 0.0 <= r.impact_severity <= 10.0


def test_report_findings_bounds():
    g = graph_from_edges(6, [(0, i, 1) for i in range(1, 6)])
    h = detect_communities(g)
    [c] = h.at_level(0)
    chat = ScriptedChat([_report_json(findings=2), _report_json(findings=12)])
    r = summarize_community(c, g, h, LLMGateway("live", chat_provider=chat))
    assert len(r.findings) == 10
    assert chat.requests[1].request_tag == "community-report-repair"


def test_report_repair_then_error():
    g, h, c = _small_community()
    with pytest.raises(LlmProtocolError):
        summarize_community(c, g, h, LLMGateway("live", chat_provider=ScriptedChat(["nope", "still nope"])))
    chat = ScriptedChat(["nope", _report_json()])
    assert summarize_community(c, g, h, LLMGateway("live", chat_provider=chat)).title == "Broker duties"


def test_report_budget_floor_uses_top_element():
    g = graph_from_edges(3, [(0, 1, 1), (1, 2, 1)])
    h = detect_communities(g)
    [c] = h.at_level(0)
    chat = ScriptedChat([_report_json()])
    summarize_community(c, g, h, LLMGateway("live", chat_provider=chat), token_budget=1)
    prompt = chat.requests[0].messages[-1][1]
    data = prompt.split("-Data-\n", 1)[1]
    lines = [line for line in data.splitlines() if line.startswith(("ENTITY", "RELATION"))]
    assert lines == ["ENTITY | N1 | Article | rank 2 | node 1"]


def test_summarize_all_bottom_up():
    g = graph_from_edges(*TWO_TRIANGLES)
    h = detect_communities(g)
    chat = ScriptedChat(lambda req: _report_json(title=f"r{len(chat.requests)}"))
    reports = summarize_all(g, h, LLMGateway("live", chat_provider=chat), workers=2)
    assert set(reports) == {c.community_id for c in h.communities}


# -- persistence --------------------------------------------------------------------


def _fig6_index():
    ents = [EntityRecord("ARTICLE 1", "Article", "broker duties", frozenset({"regs#0000"})),
            EntityRecord("ARTICLE 25", "Article", "online brokers", frozenset({"regs#0000"}))]
    g = build_graph(ents, [RelationRecord("ARTICLE 25", "ARTICLE 1", "adds mandates", 8, frozenset({"regs#0000"}))])
    h = detect_communities(g)
    gw = LLMGateway("live", chat_provider=ScriptedChat(lambda req: _report_json(rating=12, findings=2)))
    reports = summarize_all(g, h, gw)
    chunks = [Chunk("regs#0000", "regs", 0, "ARTICLE 25 adds to ARTICLE 1.", 8, (0, 29))]
    passages = [Passage("regs:1", "regs", "ARTICLE 25 adds to ARTICLE 1.", (0, 29))]
    return GraphIndex(g, h, reports, chunks, passages, {"seed": 0})


def test_persist_round_trip(tmp_path):
    idx = _fig6_index()
    persist_graph(idx, tmp_path / "g.json")
    back = load_graph(tmp_path / "g.json")
    assert back.graph == idx.graph
    assert back.hierarchy == idx.hierarchy
    assert back.reports == idx.reports
    assert back.reports[0].warnings == idx.reports[0].warnings
    assert back.chunks == idx.chunks and back.passages == idx.passages
    assert back.metadata == idx.metadata


def test_persist_deterministic(tmp_path):
    persist_graph(_fig6_index(), tmp_path / "a.json")
    persist_graph(_fig6_index(), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_load_corrupted(tmp_path):
    idx = _fig6_index()
    path = tmp_path / "g.json"
    persist_graph(idx, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(GraphFormatError):
        load_graph(path)
    data = json.loads(text)
    data["schema_version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(SchemaVersionMismatch):
        load_graph(path)
    data = json.loads(text)
    del data["nodes"][0]["rank"]
    path.write_text(json.dumps(data))
    with pytest.raises(GraphFormatError):
        load_graph(path)
    data = json.loads(text)
    data["communities"][0]["members"] = data["communities"][0]["members"][:1]
    path.write_text(json.dumps(data))
    with pytest.raises(GraphFormatError):
        load_graph(path)


def test_graphml_export(tmp_path):
    export_graphml(_fig6_index(), tmp_path / "g.graphml")
    g = nx.read_graphml(tmp_path / "g.graphml")
    assert g.number_of_nodes() == 2 and g.number_of_edges() == 1
    assert g.edges["ARTICLE 1|Article", "ARTICLE 25|Article"]["weight"] == 8.0
