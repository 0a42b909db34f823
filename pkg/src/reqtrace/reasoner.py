"""IO, CoT and ToT conformance judgments over (requirement, reference) pairs."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import prompts
from .errors import AgentCountMismatch, LlmProtocolError, UnparseableStage, UnparseableVerdict
from .labels import Label
from .llm import LLMGateway
from .retrieval import RetrievalResult, concatenate_items

logger = logging.getLogger(__name__)

AGENTS = ("A", "B", "C")
Messages = list[tuple[str, str]]


class Assessment(str, enum.Enum):
    CONFORMS = "Conforms"
    VIOLATES = "Violates"

    @property
    def label(self) -> Label:
        return Label.COMPLIANT if self is Assessment.CONFORMS else Label.NON_COMPLIANT


class Strategy(str, enum.Enum):
    IO = "io"
    COT = "cot"
    TOT = "tot"

    @classmethod
    def parse(cls, text: str) -> Strategy:
        try:
            return cls(str(text).strip().lower())
        except ValueError:
            raise ValueError(f"unknown strategy {text!r}; expected io, cot or tot") from None


class Alignment(str, enum.Enum):
    ALIGNS = "Aligns"
    PARTIALLY_ALIGNS = "PartiallyAligns"
    CONFLICTS = "Conflicts"


@dataclass(frozen=True)
class Breakdown:
    purpose: str
    action: str
    conditions: str


@dataclass(frozen=True)
class Judgement:
    alignment: Alignment
    reasoning: str


@dataclass(frozen=True)
class ComponentAnalysis:
    purpose_analysis: Judgement
    action_analysis: Judgement
    conditions_analysis: Judgement


@dataclass(frozen=True)
class TraceEntry:
    stage: int
    prompt_hash: str
    parsed: Any
    raw: str = ""


@dataclass(frozen=True)
class Verdict:
    assessment: Assessment
    explanation: str
    strategy: Strategy
    trace: tuple[TraceEntry, ...]

    @property
    def label(self) -> Label:
        return self.assessment.label


STAGE_COUNTS = {Strategy.IO: 1, Strategy.COT: 4, Strategy.TOT: 3}


def _hash(*texts: str) -> str:
    digest = hashlib.sha256()
    for t in texts:
        digest.update(t.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()[:16]


def _plain(obj: Any) -> Any:
    """Dataclasses and enums to JSON-ready values."""
    if isinstance(obj, enum.Enum):
        return obj.value
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^\s*[-*\d.]*\s*\**([A-Za-z][A-Za-z /'()]*?)\**\s*:\s*(.*)$")


def _fields(text: str) -> list[tuple[str, str]]:
    """``Name: value`` pairs in order; non-header lines continue the previous value."""
    out: list[list[str]] = []
    for line in text.splitlines():
        m = _HEADER_RE.match(line)
        if m:
            out.append([m.group(1).strip().lower(), m.group(2).strip()])
        elif out and line.strip():
            out[-1][1] = (out[-1][1] + " " + line.strip()).strip()
    return [(k, v) for k, v in out]


def _clean_value(value: str) -> str:
    return value.strip().strip("[]").strip()


_ASSESSMENT_RE = re.compile(r"\b(conforms|violates)\b", re.IGNORECASE)


def parse_assessment(text: str) -> tuple[Assessment, str]:
    """Read the ``Assessment`` (or ``Overall Assessment``) line and its explanation."""
    assessment = None
    explanation = ""
    for name, value in _fields(text):
        if name.endswith("assessment") and assessment is None:
            words = {w.lower() for w in _ASSESSMENT_RE.findall(value)}
            if len(words) == 1:
                assessment = Assessment.CONFORMS if words == {"conforms"} else Assessment.VIOLATES
        elif name in ("explanation", "rationale") and assessment is not None and not explanation:
            explanation = _clean_value(value)
    if assessment is None:
        raise UnparseableVerdict("no Assessment line naming exactly one of Conforms or Violates")
    return assessment, explanation


def _breakdown_from(fields: Sequence[tuple[str, str]]) -> Breakdown | None:
    found: dict[str, str] = {}
    for name, value in fields:
        if name == "purpose":
            key = "purpose"
        elif name == "action":
            key = "action"
        elif name.startswith("condition"):
            key = "conditions"
        else:
            continue
        found.setdefault(key, _clean_value(value))
    if set(found) != {"purpose", "action", "conditions"}:
        return None
    return Breakdown(found["purpose"], found["action"], found["conditions"])


def parse_breakdowns(text: str) -> tuple[Breakdown, Breakdown]:
    """Requirement and reference breakdowns from a decomposition answer."""
    fields = _fields(text)
    req_at = next((i for i, (n, _) in enumerate(fields) if n.startswith("requirement component")), None)
    ref_at = next((i for i, (n, _) in enumerate(fields) if n.startswith("reference") and "component" in n), None)
    if req_at is None or ref_at is None:
        raise LlmProtocolError("expected 'Requirement Components' and 'Reference Text Components' sections")
    if req_at < ref_at:
        req, ref = _breakdown_from(fields[req_at + 1 : ref_at]), _breakdown_from(fields[ref_at + 1 :])
    else:
        ref, req = _breakdown_from(fields[ref_at + 1 : req_at]), _breakdown_from(fields[req_at + 1 :])
    if req is None or ref is None:
        raise LlmProtocolError("each component section needs Purpose, Action and Conditions/Constraints")
    return req, ref


def parse_consolidated(text: str) -> Breakdown:
    fields = _fields(text)
    start = next((i for i, (n, _) in enumerate(fields) if "consolidated" in n), -1)
    b = _breakdown_from(fields[start + 1 :])
    if b is None:
        raise LlmProtocolError("consolidated breakdown needs Purpose, Action and Conditions/Constraints")
    return b


_LEAD_RE = re.compile(r"^\W*(partially\s+aligns?|aligns?|conflicts?)\b", re.IGNORECASE)


def parse_alignment(value: str) -> Alignment:
    m = _LEAD_RE.match(value)
    word = m.group(1).lower() if m else ""
    if not word:
        low = value.lower()
        if "conflict" in low or "contradict" in low:
            word = "conflict"
        elif "partially align" in low:
            word = "partially"
        elif "align" in low:
            word = "align"
    if word.startswith("partially"):
        return Alignment.PARTIALLY_ALIGNS
    if word.startswith("conflict"):
        return Alignment.CONFLICTS
    if word.startswith("align"):
        return Alignment.ALIGNS
    raise LlmProtocolError(f"no alignment label in {value[:60]!r}")


def parse_analysis(text: str) -> ComponentAnalysis:
    found: dict[str, Judgement] = {}
    for name, value in _fields(text):
        if not name.endswith("analysis"):
            continue
        if name.startswith("purpose"):
            key = "purpose"
        elif name.startswith("action"):
            key = "action"
        elif name.startswith("condition"):
            key = "conditions"
        else:
            continue
        if key not in found:
            found[key] = Judgement(parse_alignment(_clean_value(value)), _clean_value(value))
    missing = {"purpose", "action", "conditions"} - set(found)
    if missing:
        raise LlmProtocolError(f"missing analysis for {sorted(missing)}")
    return ComponentAnalysis(found["purpose"], found["action"], found["conditions"])


# ---------------------------------------------------------------------------
# Stage runner
# ---------------------------------------------------------------------------


def _ask(
    gateway: LLMGateway,
    messages: Messages,
    tag: str,
    parse: Callable[[str], Any],
    on_fail: Callable[[str], Exception],
) -> tuple[str, Any]:
    """One call plus at most one repair round."""
    reply = gateway.complete(messages, tag=tag)
    try:
        return reply, parse(reply)
    except LlmProtocolError as first:
        logger.info("%s: unparseable output (%s); repairing", tag, first)
        repair = messages + [("assistant", reply), ("user", prompts.render("repair", problem=str(first)))]
        reply = gateway.complete(repair, tag=f"{tag}-repair")
        try:
            return reply, parse(reply)
        except LlmProtocolError as second:
            raise on_fail(str(second)) from second


def _check_inputs(requirement: str, reference: str) -> None:
    if not requirement.strip():
        raise ValueError("requirement text is empty")
    if not reference.strip():
        raise ValueError("reference text is empty")


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


def check_io(requirement: str, reference: str, gateway: LLMGateway) -> Verdict:
    _check_inputs(requirement, reference)
    prompt = prompts.render("io", requirement=requirement, reference_text=reference)
    raw, (assessment, explanation) = _ask(
        gateway, [("user", prompt)], "io", parse_assessment, lambda d: UnparseableVerdict(d)
    )
    trace = (TraceEntry(1, _hash(prompt), {"assessment": assessment, "explanation": explanation}, raw),)
    return Verdict(assessment, explanation, Strategy.IO, trace)


def cot_run(requirement: str, reference: str, gateway: LLMGateway) -> Verdict:
    """Four sequential turns of one conversation; each answer is parsed before the next prompt."""
    _check_inputs(requirement, reference)
    trace: list[TraceEntry] = []
    messages: Messages = []

    def stage(n: int, prompt: str, parse: Callable[[str], Any]) -> Any:
        messages.append(("user", prompt))
        raw, parsed = _ask(gateway, list(messages), f"cot-{n}", parse, lambda d: UnparseableStage(n, d))
        messages.append(("assistant", raw))
        trace.append(TraceEntry(n, _hash(prompt), parsed, raw))
        return parsed

    req, ref = stage(1, prompts.render("cot_1", requirement=requirement, reference_text=reference), parse_breakdowns)
    confirm = prompts.render(
        "cot_2",
        requirement_purpose=req.purpose,
        requirement_action=req.action,
        requirement_conditions=req.conditions,
        reference_purpose=ref.purpose,
        reference_action=ref.action,
        reference_conditions=ref.conditions,
    )
    stage(2, confirm, parse_breakdowns)
    stage(3, prompts.load("cot_3"), parse_analysis)
    assessment, explanation = stage(4, prompts.load("cot_4"), parse_assessment)
    return Verdict(assessment, explanation, Strategy.COT, tuple(trace))


def _tot_stage_multi(
    gateway: LLMGateway,
    n: int,
    inputs: dict[str, str],
    agent_parse: Callable[[str], Any],
    arbiter_parse: Callable[[str], Any],
    workers: int,
) -> tuple[TraceEntry, str, Any]:
    agent_prompts = [prompts.render(f"tot_agent_{n}", agent=a, **inputs) for a in AGENTS]

    def run_agent(i: int) -> tuple[str, Any]:
        tag = f"tot-{n}-agent-{AGENTS[i].lower()}"
        return _ask(gateway, [("user", agent_prompts[i])], tag, agent_parse, lambda d: UnparseableStage(n, d))

    with ThreadPoolExecutor(max_workers=max(1, min(3, workers))) as pool:
        agent_out = list(pool.map(run_agent, range(3)))
    arbiter_prompt = prompts.render(
        f"tot_arbiter_{n}",
        agent_a=agent_out[0][0].strip(),
        agent_b=agent_out[1][0].strip(),
        agent_c=agent_out[2][0].strip(),
        **inputs,
    )
    raw, parsed = _ask(
        gateway, [("user", arbiter_prompt)], f"tot-{n}-arbiter", arbiter_parse, lambda d: UnparseableStage(n, d)
    )
    entry = TraceEntry(
        n,
        _hash(*agent_prompts, arbiter_prompt),
        {"agents": {a: p for a, (_, p) in zip(AGENTS, agent_out)}, "arbiter": parsed},
        raw,
    )
    return entry, raw, parsed


_AGENT_RE = re.compile(r"^\W*Agent\s+([ABC])\b", re.IGNORECASE | re.MULTILINE)
_ARBITER_RE = re.compile(r"^\W*(?:Arbiter|Final Consolidated Components)", re.IGNORECASE | re.MULTILINE)


def split_agent_blocks(text: str, stage: int) -> tuple[dict[str, str], str]:
    """Agent A/B/C blocks and the arbiter block of a single-call ToT answer."""
    heads = [(m.start(), m.group(1).upper()) for m in _AGENT_RE.finditer(text)]
    found = sorted({a for _, a in heads})
    if found != list(AGENTS):
        raise AgentCountMismatch(stage, len(found))
    last_agent = max(pos for pos, _ in heads)
    arb = [m.start() for m in _ARBITER_RE.finditer(text) if m.start() > last_agent]
    if not arb:
        raise UnparseableStage(stage, "no arbiter block after the agent blocks")
    blocks: dict[str, str] = {}
    bounds = heads + [(arb[0], "")]
    for (start, agent), (end, _) in zip(bounds, bounds[1:]):
        blocks[agent] = (blocks.get(agent, "") + "\n" + text[start:end]).strip()
    return blocks, text[arb[0] :].strip()


def _tot_stage_single(
    gateway: LLMGateway,
    n: int,
    inputs: dict[str, str],
    agent_parse: Callable[[str], Any],
    arbiter_parse: Callable[[str], Any],
) -> tuple[TraceEntry, str, Any]:
    prompt = prompts.render(f"tot_{n}", **inputs)

    def parse(text: str) -> tuple[dict[str, Any], str, Any]:
        blocks, arbiter = split_agent_blocks(text, n)
        return {a: agent_parse(blocks[a]) for a in AGENTS}, arbiter, arbiter_parse(arbiter)

    reply = gateway.complete([("user", prompt)], tag=f"tot-{n}")
    try:
        agents, arbiter_raw, parsed = parse(reply)
    except AgentCountMismatch:
        raise
    except LlmProtocolError as first:
        repair = [("user", prompt), ("assistant", reply), ("user", prompts.render("repair", problem=str(first)))]
        reply = gateway.complete(repair, tag=f"tot-{n}-repair")
        try:
            agents, arbiter_raw, parsed = parse(reply)
        except AgentCountMismatch:
            raise
        except LlmProtocolError as second:
            raise UnparseableStage(n, str(second)) from second
    return TraceEntry(n, _hash(prompt), {"agents": agents, "arbiter": parsed}, reply), arbiter_raw, parsed


def _breakdown_pair(text: str) -> tuple[Breakdown, Breakdown] | Breakdown:
    try:
        return parse_breakdowns(text)
    except LlmProtocolError:
        # agents sometimes answer in the combined layout of the consolidated format
        return parse_consolidated(text)


def tot_run(requirement: str, reference: str, gateway: LLMGateway, mode: str = "multi", workers: int = 3) -> Verdict:
    """Three stages of three agents plus an arbiter; the stage-3 arbiter decides.

    ``mode="multi"`` issues one call per agent and per arbiter; agents only see
    the previous stage's arbiter output. ``mode="single"`` sends the roleplay
    prompt once per stage and splits the answer into agent and arbiter blocks.
    """
    _check_inputs(requirement, reference)
    if mode not in ("multi", "single"):
        raise ValueError("mode must be 'multi' or 'single'")

    def run(n: int, inputs: dict[str, str], agent_parse, arbiter_parse):
        if mode == "multi":
            return _tot_stage_multi(gateway, n, inputs, agent_parse, arbiter_parse, workers)
        return _tot_stage_single(gateway, n, inputs, agent_parse, arbiter_parse)

    e1, raw1, _ = run(1, {"requirement": requirement, "reference_text": reference}, _breakdown_pair, parse_consolidated)
    e2, raw2, _ = run(2, {"consolidated_breakdown": raw1}, parse_analysis, parse_analysis)
    e3, _, (assessment, explanation) = run(3, {"consolidated_analysis": raw2}, parse_assessment, parse_assessment)
    return Verdict(assessment, explanation, Strategy.TOT, (e1, e2, e3))


def run_strategy(strategy: Strategy, requirement: str, reference: str, gateway: LLMGateway, tot_mode: str = "multi") -> Verdict:
    if strategy is Strategy.IO:
        return check_io(requirement, reference, gateway)
    if strategy is Strategy.COT:
        return cot_run(requirement, reference, gateway)
    return tot_run(requirement, reference, gateway, mode=tot_mode)


# ---------------------------------------------------------------------------
# Classification and verdict files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Decision:
    req_id: str
    strategy: Strategy
    label: Label
    verdict: Verdict | None = None
    references: tuple[str, ...] = field(default=())

    def to_json(self) -> dict[str, Any]:
        return {
            "req_id": self.req_id,
            "strategy": self.strategy.value,
            "label": self.label.value,
            "explanation": self.verdict.explanation if self.verdict else "no reference passage cleared the threshold",
            "references": list(self.references),
            "trace": _plain(list(self.verdict.trace)) if self.verdict else [],
        }


def decide(
    req_id: str,
    requirement: str,
    retrieval: RetrievalResult,
    strategy: Strategy,
    gateway: LLMGateway,
    tot_mode: str = "multi",
) -> Decision:
    """Empty retrieval means Irrelevant without any chat call."""
    if not retrieval.items:
        return Decision(req_id, strategy, Label.IRRELEVANT)
    reference = concatenate_items(retrieval.items)
    verdict = run_strategy(strategy, requirement, reference, gateway, tot_mode)
    refs = tuple(i.provenance.passage_id for i in retrieval.items)
    return Decision(req_id, strategy, verdict.label, verdict, refs)


def classify(
    requirement: str, retrieval: RetrievalResult, strategy: Strategy, gateway: LLMGateway, tot_mode: str = "multi"
) -> Label:
    return decide(retrieval.query_req_id, requirement, retrieval, strategy, gateway, tot_mode).label


def write_verdicts(decisions: Iterable[Decision], path: str | Path, extra: Mapping[str, Any] | None = None) -> None:
    """JSON lines sorted by (req_id, strategy); ``extra`` fields are added to every row."""
    rows = sorted(decisions, key=lambda d: (d.req_id, d.strategy.value))
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in rows:
            fh.write(json.dumps({**(extra or {}), **d.to_json()}, sort_keys=True, ensure_ascii=False) + "\n")


def read_verdicts(path: str | Path) -> list[dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
