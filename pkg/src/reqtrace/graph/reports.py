"""LLM-written community reports."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

from .. import prompts
from ..errors import LlmProtocolError
from ..llm import LLMGateway
from ..tokenizer import count_tokens
from .leiden import Community, CommunityHierarchy
from .model import KnowledgeGraph
from .ranking import static_scores

logger = logging.getLogger(__name__)

MAX_FINDINGS = 10
LARGE_COMMUNITY = 5
DEFAULT_REPORT_BUDGET = 2000


@dataclass(frozen=True)
class Finding:
    summary: str
    explanation: str


@dataclass(frozen=True)
class CommunityReport:
    community_id: int
    title: str
    summary: str
    impact_severity: float
    rating_explanation: str
    findings: tuple[Finding, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def to_json(self) -> dict:
        return {
            "community_id": self.community_id,
            "title": self.title,
            "summary": self.summary,
            "impact_severity": self.impact_severity,
            "rating_explanation": self.rating_explanation,
            "findings": [{"summary": f.summary, "explanation": f.explanation} for f in self.findings],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, data: dict) -> CommunityReport:
        return cls(
            int(data["community_id"]),
            data["title"],
            data["summary"],
            float(data["impact_severity"]),
            data["rating_explanation"],
            tuple(Finding(f["summary"], f["explanation"]) for f in data["findings"]),
            tuple(data.get("warnings", ())),
        )


def min_findings(community: Community) -> int:
    return LARGE_COMMUNITY if community.size >= LARGE_COMMUNITY else 1


# -- context assembly -----------------------------------------------------------


def _one_line(text: str) -> str:
    return " ".join(text.split())


def element_lines(community: Community, graph: KnowledgeGraph) -> list[str]:
    """Entity and relation lines, highest-ranked first."""
    members = sorted(community.members, key=lambda k: (-graph.nodes[k].rank, k))
    lines = []
    for k in members:
        n = graph.nodes[k]
        lines.append(f"ENTITY | {n.name} | {n.entity_type} | rank {n.rank} | {_one_line(n.description)}")
    edges = sorted(graph.subgraph_edges(community.members), key=lambda e: (-e.weight, e.pair))
    for e in edges:
        a, b = graph.nodes[e.source].name, graph.nodes[e.target].name
        lines.append(f"RELATION | {a} | {b} | weight {e.weight:g} | {_one_line(e.description)}")
    return lines


def _pack(lines: list[str], budget: int) -> list[str]:
    """Greedy prefix packing; the first line is always kept."""
    packed: list[str] = []
    used = 0
    for line in lines:
        cost = count_tokens(line) + 1
        if packed and used + cost > budget:
            break
        packed.append(line)
        used += cost
    return packed


def community_context(
    community: Community,
    graph: KnowledgeGraph,
    hierarchy: CommunityHierarchy,
    reports: Mapping[int, CommunityReport],
    token_budget: int,
) -> str:
    """Prompt data for a community.

    Element descriptions are used when they all fit. Otherwise the reports of
    real sub-communities are packed in static-rank order, and failing that the
    highest-ranked elements are packed. At least one line is always included.
    """
    lines = element_lines(community, graph)
    if sum(count_tokens(line) + 1 for line in lines) <= token_budget:
        return "\n".join(lines)
    kids = hierarchy.children(community.community_id) if hierarchy.is_split(community.community_id) else []
    kids = [k for k in kids if k.community_id in reports]
    if kids:
        statics = static_scores(kids, graph)
        kids.sort(key=lambda c: (-statics[c.community_id], c.community_id))
        summaries = []
        for c in kids:
            r = reports[c.community_id]
            summaries.append(f"SUBCOMMUNITY | {_one_line(r.title)} | {_one_line(r.summary)}")
        return "\n".join(_pack(summaries, token_budget))
    return "\n".join(_pack(lines, token_budget))


# -- parsing ----------------------------------------------------------------------


def parse_report(text: str, community: Community) -> CommunityReport:
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise LlmProtocolError("no JSON object in report")
    try:
        data = json.loads(text[start : end + 1])
    except json.JSONDecodeError as exc:
        raise LlmProtocolError(f"invalid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise LlmProtocolError("report is not a JSON object")
    for key in ("title", "summary", "rating", "rating_explanation", "findings"):
        if key not in data:
            raise LlmProtocolError(f"report lacks {key!r}")
    warnings = []
    try:
        rating = float(data["rating"])
    except (TypeError, ValueError) as exc:
        raise LlmProtocolError(f"rating {data['rating']!r} is not a number") from exc
    if rating != rating:
        raise LlmProtocolError("rating is NaN")
    if not 0.0 <= rating <= 10.0:
        clamped = min(10.0, max(0.0, rating))
        warnings.append(f"impact severity {rating:g} clamped to {clamped:g}")
        logger.warning("community %d: %s", community.community_id, warnings[-1])
        rating = clamped
    raw = data["findings"]
    if not isinstance(raw, list):
        raise LlmProtocolError("findings is not a list")
    findings = []
    for item in raw:
        if not isinstance(item, dict) or "summary" not in item or "explanation" not in item:
            raise LlmProtocolError("finding lacks summary/explanation")
        findings.append(Finding(str(item["summary"]), str(item["explanation"])))
    need = min_findings(community)
    if len(findings) < need:
        raise LlmProtocolError(f"{len(findings)} finding(s); at least {need} required")
    if len(findings) > MAX_FINDINGS:
        warnings.append(f"{len(findings)} findings truncated to {MAX_FINDINGS}")
        findings = findings[:MAX_FINDINGS]
    return CommunityReport(
        community.community_id,
        str(data["title"]),
        str(data["summary"]),
        rating,
        str(data["rating_explanation"]),
        tuple(findings),
        tuple(warnings),
    )


def summarize_community(
    community: Community,
    graph: KnowledgeGraph,
    hierarchy: CommunityHierarchy,
    gateway: LLMGateway,
    reports: Mapping[int, CommunityReport] | None = None,
    token_budget: int = DEFAULT_REPORT_BUDGET,
) -> CommunityReport:
    if not community.members:
        raise ValueError("community is empty")
    context = community_context(community, graph, hierarchy, reports or {}, token_budget)
    prompt = prompts.render("community_report", min_findings=min_findings(community), input_text=context)
    messages = [("user", prompt)]
    reply = gateway.complete(messages, tag="community-report")
    try:
        return parse_report(reply, community)
    except LlmProtocolError as first:
        logger.info("community %d report unparseable (%s); repairing", community.community_id, first)
        messages += [("assistant", reply), ("user", prompts.render("repair", problem=str(first)))]
        reply = gateway.complete(messages, tag="community-report-repair")
        try:
            return parse_report(reply, community)
        except LlmProtocolError as second:
            raise LlmProtocolError(f"community {community.community_id}: {second}") from second


def summarize_all(
    graph: KnowledgeGraph,
    hierarchy: CommunityHierarchy,
    gateway: LLMGateway,
    token_budget: int = DEFAULT_REPORT_BUDGET,
    workers: int = 4,
) -> dict[int, CommunityReport]:
    """Report every community, deepest level first so parents can use child reports."""
    reports: dict[int, CommunityReport] = {}
    for level in reversed(range(hierarchy.levels)):
        batch = hierarchy.at_level(level)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            done = list(
                pool.map(lambda c: summarize_community(c, graph, hierarchy, gateway, reports, token_budget), batch)
            )
        for report in done:
            reports[report.community_id] = report
    return reports
