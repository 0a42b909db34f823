"""LLM-driven entity / relationship extraction and element summarization."""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from . import prompts
from .corpus import Chunk, GlossaryEntry
from .errors import LlmProtocolError, MalformedRecord
from .llm import LLMGateway
from .tokenizer import truncate_to_tokens

logger = logging.getLogger(__name__)

TUPLE_DELIMITER = "<|>"
RECORD_DELIMITER = "##"
COMPLETION_DELIMITER = "<|COMPLETE|>"
DEFAULT_ENTITY_TYPES = ("Article", "Standard", "Requirement")
STRENGTH_RANGE = (1.0, 10.0)
DESCRIPTION_SEPARATOR = "\n"

DEFAULT_FEW_SHOT = (
    "Entity types: Article, Standard, Requirement\n"
    "Text: ARTICLE 7 requires every online broker to log customer orders. "
    "ARTICLE 9 extends ARTICLE 7 by requiring logs to be kept for five years, "
    "following ISO 27001 retention controls.\n"
    "Output:\n"
    '("entity"<|>"ARTICLE 7"<|>"article"<|>"ARTICLE 7 requires online brokers to log customer orders")\n##\n'
    '("entity"<|>"ARTICLE 9"<|>"article"<|>"ARTICLE 9 requires order logs to be retained for five years")\n##\n'
    '("entity"<|>"ISO 27001"<|>"standard"<|>"ISO 27001 is the information security standard whose retention controls apply")\n##\n'
    '("relationship"<|>"ARTICLE 9"<|>"ARTICLE 7"<|>"ARTICLE 9 adds a retention period to the logging duty of ARTICLE 7"<|>"8")\n##\n'
    '("relationship"<|>"ARTICLE 9"<|>"ISO 27001"<|>"ARTICLE 9 follows the ISO 27001 retention controls"<|>"5")\n'
    "<|COMPLETE|>"
)


@dataclass(frozen=True)
class EntityRecord:
    name: str
    entity_type: str
    description: str
    source_chunks: frozenset[str] = frozenset()

    @property
    def key(self) -> tuple[str, str]:
        return (self.name, self.entity_type)


@dataclass(frozen=True)
class RelationRecord:
    source: str
    target: str
    description: str
    strength: float
    source_chunks: frozenset[str] = frozenset()


@dataclass
class ExtractionConfig:
    entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES
    max_gleanings: int = 1
    few_shot_examples: Sequence[str] = (DEFAULT_FEW_SHOT,)
    glossary_entity_type: str = "Standard"
    summary_max_tokens: int = 150

    def __post_init__(self):
        if not self.entity_types:
            raise ValueError("entity_types must not be empty")
        if self.max_gleanings < 0:
            raise ValueError("max_gleanings must be >= 0")


@dataclass
class ParseResult:
    entities: list[EntityRecord] = field(default_factory=list)
    relations: list[RelationRecord] = field(default_factory=list)
    malformed: int = 0

    @property
    def records(self) -> list[EntityRecord | RelationRecord]:
        return [*self.entities, *self.relations]


@dataclass
class ExtractionResult:
    entities: list[EntityRecord]
    relations: list[RelationRecord]
    malformed: int = 0
    rounds: int = 1


# ---------------------------------------------------------------------------
# Record format
# ---------------------------------------------------------------------------

_RECORD_START_RE = re.compile(r'\(\s*"?\s*(entity|relationship)\s*"?\s*' + re.escape(TUPLE_DELIMITER), re.IGNORECASE)
_RECORD_END_RE = re.compile(r"\)\s*(?:" + re.escape(RECORD_DELIMITER) + r"|\n|$)")


def _quote(value: str) -> str:
    return f'"{value}"'


def _format_strength(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def format_records(records: Iterable[EntityRecord | RelationRecord]) -> str:
    """Serialize records in the extraction wire format, ending with the completion delimiter."""
    out = []
    for r in records:
        if isinstance(r, EntityRecord):
            fields = ["entity", r.name, r.entity_type, r.description]
        else:
            fields = ["relationship", r.source, r.target, r.description, _format_strength(r.strength)]
        out.append("(" + TUPLE_DELIMITER.join(_quote(f) for f in fields) + ")")
    return f"\n{RECORD_DELIMITER}\n".join(out) + ("\n" if out else "") + COMPLETION_DELIMITER


def _unquote(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == '"' and value[-1] == '"':
        value = value[1:-1]
    return value


def parse_extraction_output(
    text: str,
    entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES,
    chunk_id: str | None = None,
) -> ParseResult:
    """Parse entity/relationship tuples out of a model response.

    Prose around the records is ignored; parsing stops at the completion
    delimiter. Records with the wrong arity, an unknown entity type, a
    non-numeric strength or a self-loop are skipped and counted. Raises
    :class:`MalformedRecord` only when every record found was malformed.
    """
    body = text.split(COMPLETION_DELIMITER, 1)[0]
    types = {t.lower(): t for t in entity_types}
    chunks = frozenset({chunk_id}) if chunk_id else frozenset()
    result = ParseResult()
    starts = list(_RECORD_START_RE.finditer(body))
    for i, m in enumerate(starts):
        stop = starts[i + 1].start() if i + 1 < len(starts) else len(body)
        segment = body[m.start() + 1 : stop]
        end = _RECORD_END_RE.search(segment)
        if end is not None:
            segment = segment[: end.start()]
        fields = [_unquote(f) for f in segment.split(TUPLE_DELIMITER)]
        kind = m.group(1).lower()
        record = _build_record(kind, fields, types, chunks)
        if record is None:
            result.malformed += 1
            logger.debug("malformed extraction record: %r", segment[:120])
        elif isinstance(record, EntityRecord):
            result.entities.append(record)
        else:
            result.relations.append(record)
    if result.malformed and not (result.entities or result.relations):
        raise MalformedRecord(result.malformed)
    return result


def _build_record(kind, fields, types, chunks):
    if kind == "entity":
        if len(fields) != 4:
            return None
        _, name, etype, desc = fields
        name = name.upper()
        etype = types.get(etype.lower())
        if not name or etype is None:
            return None
        return EntityRecord(name, etype, desc, chunks)
    if len(fields) != 5:
        return None
    _, source, target, desc, strength = fields
    source, target = source.upper(), target.upper()
    try:
        value = float(strength)
    except ValueError:
        return None
    if not source or not target or source == target or not math.isfinite(value):
        return None
    lo, hi = STRENGTH_RANGE
    return RelationRecord(source, target, desc, min(hi, max(lo, value)), chunks)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def _delims() -> dict[str, str]:
    return {
        "tuple_delimiter": TUPLE_DELIMITER,
        "record_delimiter": RECORD_DELIMITER,
        "completion_delimiter": COMPLETION_DELIMITER,
    }


def _ask_and_parse(gateway, messages, tag, config, chunk_id):
    """One model turn plus at most one repair turn. Returns (parsed, text used)."""
    text = gateway.complete(messages, tag=tag)
    try:
        return parse_extraction_output(text, config.entity_types, chunk_id), text
    except MalformedRecord:
        repair = prompts.render(
            "extract_repair", bad_output=text, entity_types=", ".join(config.entity_types), **_delims()
        )
        fixed = gateway.complete([*messages, ("assistant", text), ("user", repair)], tag=f"{tag}-repair")
        try:
            return parse_extraction_output(fixed, config.entity_types, chunk_id), fixed
        except MalformedRecord as exc:
            raise LlmProtocolError(f"extraction output for {chunk_id} unparseable after repair") from exc


def extract_elements(chunk: Chunk, config: ExtractionConfig, gateway: LLMGateway) -> ExtractionResult:
    if not chunk.text.strip():
        raise ValueError(f"chunk {chunk.chunk_id} is empty")
    prompt = prompts.render(
        "extract_entities",
        entity_types=", ".join(config.entity_types),
        few_shot="\n\n".join(config.few_shot_examples),
        input_text=chunk.text,
        **_delims(),
    )
    history: list[tuple[str, str]] = [("user", prompt)]
    parsed, text = _ask_and_parse(gateway, history, "extract", config, chunk.chunk_id)
    entities, relations, malformed = list(parsed.entities), list(parsed.relations), parsed.malformed
    history.append(("assistant", text))
    rounds = 1
    for _ in range(config.max_gleanings):
        history.append(("user", prompts.render("extract_continue", **_delims())))
        parsed, text = _ask_and_parse(gateway, history, "glean", config, chunk.chunk_id)
        history.append(("assistant", text))
        rounds += 1
        malformed += parsed.malformed
        if not parsed.records:
            break
        entities.extend(parsed.entities)
        relations.extend(parsed.relations)
    return ExtractionResult(entities, relations, malformed, rounds)


# ---------------------------------------------------------------------------
# Merging and summarization
# ---------------------------------------------------------------------------


def _join_descriptions(records, order) -> str:
    parts: list[str] = []
    for r in sorted(records, key=order):
        for part in r.description.split(DESCRIPTION_SEPARATOR):
            part = part.strip()
            if part and part not in parts:
                parts.append(part)
    return DESCRIPTION_SEPARATOR.join(parts)


def _first_chunk(record) -> str:
    return min(record.source_chunks) if record.source_chunks else ""


def merge_entities(records: Iterable[EntityRecord], chunk_order: Mapping[str, object] | None = None) -> list[EntityRecord]:
    """Merge records sharing (uppercased name, type).

    Source chunks are unioned; descriptions are de-duplicated and concatenated
    in chunk order (``chunk_order`` maps chunk id to a sort key, defaulting to
    the chunk id itself). Output is sorted by key.
    """
    def order(r):
        first = _first_chunk(r)
        return (chunk_order[first] if chunk_order and first in chunk_order else first, r.description)

    groups: dict[tuple[str, str], list[EntityRecord]] = {}
    for r in records:
        groups.setdefault((r.name.upper(), r.entity_type), []).append(r)
    merged = []
    for (name, etype), group in sorted(groups.items()):
        chunks = frozenset().union(*(r.source_chunks for r in group))
        merged.append(EntityRecord(name, etype, _join_descriptions(group, order), chunks))
    return merged


def merge_relations(records: Iterable[RelationRecord], chunk_order: Mapping[str, object] | None = None) -> list[RelationRecord]:
    """Merge records sharing (source, target); strength is the maximum, so it stays on the 1-10 scale."""
    def order(r):
        first = _first_chunk(r)
        return (chunk_order[first] if chunk_order and first in chunk_order else first, r.description)

    groups: dict[tuple[str, str], list[RelationRecord]] = {}
    for r in records:
        groups.setdefault((r.source.upper(), r.target.upper()), []).append(r)
    merged = []
    for (src, dst), group in sorted(groups.items()):
        chunks = frozenset().union(*(r.source_chunks for r in group))
        strength = max(r.strength for r in group)
        merged.append(RelationRecord(src, dst, _join_descriptions(group, order), strength, chunks))
    return merged


def summarize_element(
    descriptions: Sequence[str],
    gateway: LLMGateway | None,
    *,
    element_name: str = "",
    max_tokens: int = 150,
) -> str:
    if not descriptions:
        raise ValueError("summarize_element needs at least one description")
    if len(descriptions) == 1:
        return descriptions[0]
    prompt = prompts.render(
        "summarize_descriptions",
        element_name=element_name or "(unnamed)",
        description_list="\n".join(f"- {d}" for d in descriptions),
        max_tokens=max_tokens,
    )
    messages = [("user", prompt)]
    text = gateway.complete(messages, tag="summarize-element").strip()
    if not text:
        repair = prompts.render("repair", problem="the summary was empty")
        text = gateway.complete([*messages, ("assistant", ""), ("user", repair)], tag="summarize-element-repair").strip()
        if not text:
            raise LlmProtocolError(f"empty summary for {element_name!r}")
    return truncate_to_tokens(text, max_tokens)


def summarize_elements(
    entities: Sequence[EntityRecord],
    relations: Sequence[RelationRecord],
    gateway: LLMGateway,
    config: ExtractionConfig,
    workers: int = 4,
) -> tuple[list[EntityRecord], list[RelationRecord]]:
    """Collapse multi-part descriptions of merged elements into one summary each."""

    def one(item):
        parts = item.description.split(DESCRIPTION_SEPARATOR) if item.description else [""]
        if len(parts) == 1:
            return item
        name = item.name if isinstance(item, EntityRecord) else f"{item.source} -> {item.target}"
        summary = summarize_element(parts, gateway, element_name=name, max_tokens=config.summary_max_tokens)
        return replace(item, description=summary)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        new_entities = list(pool.map(one, entities))
        new_relations = list(pool.map(one, relations))
    return new_entities, new_relations


def glossary_entities(
    entries: Iterable[GlossaryEntry],
    chunks: Sequence[Chunk],
    entity_type: str = "Standard",
) -> list[EntityRecord]:
    """Seed glossary terms as entities attached to the chunks that mention them."""
    by_doc: dict[str, list[Chunk]] = {}
    for c in chunks:
        by_doc.setdefault(c.doc_id, []).append(c)
    out = []
    for e in entries:
        doc_chunks = by_doc.get(e.source_doc, [])
        hits = frozenset(c.chunk_id for c in doc_chunks if e.term in c.text)
        if not hits and doc_chunks:
            hits = frozenset({doc_chunks[0].chunk_id})
        if not hits:
            continue
        out.append(EntityRecord(e.term.upper(), entity_type, f"{e.term}: {e.definition}", hits))
    return out
