"""Document ingestion, cleaning, glossary extraction and chunking."""

from __future__ import annotations

import enum
import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DuplicateDocument, EmptyDocument, InvalidChunkConfig, UnreadableFile
from .tokenizer import iter_words, token_spans

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 600
DEFAULT_CHUNK_OVERLAP = 100


class DocumentKind(str, enum.Enum):
    REFERENCE = "reference"
    REQUIREMENT = "requirement"


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str
    kind: DocumentKind
    source_path: str = ""


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    ordinal: int
    text: str
    token_count: int
    char_span: tuple[int, int]


@dataclass(frozen=True)
class GlossaryEntry:
    term: str
    definition: str
    source_doc: str


@dataclass(frozen=True)
class Passage:
    """One retrievable unit of reference text: a non-empty line of a cleaned body."""

    passage_id: str
    doc_id: str
    text: str
    char_span: tuple[int, int]


STRUCTURED_FIELDS = ("Title", "Description", "Input", "Processing", "Output", "ErrorHandling")


@dataclass(frozen=True)
class Requirement:
    req_id: str
    text: str
    structured_fields: Mapping[str, str] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"requirement {self.req_id!r} has empty text")
        if self.structured_fields:
            bad = set(self.structured_fields) - set(STRUCTURED_FIELDS)
            if bad:
                raise ValueError(f"unknown structured field(s) {sorted(bad)} in {self.req_id!r}")


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def ingest(path: str | Path, kind: DocumentKind | str) -> Document:
    path = Path(path)
    kind = DocumentKind(kind)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        logger.warning("%s is not valid UTF-8; undecodable bytes replaced", path)
        text = raw.decode("utf-8", errors="replace")
    if text.startswith("\ufeff"):
        text = text[1:]
    body = text.replace("\r\n", "\n").replace("\r", "\n")
    if not body.strip():
        raise EmptyDocument(str(path))
    return Document(
        doc_id=path.stem,
        title=_guess_title(body, path.stem),
        body=body,
        kind=kind,
        source_path=str(path),
    )


def _guess_title(body: str, fallback: str) -> str:
    for line in body.split("\n"):
        line = line.strip().lstrip("#").strip()
        if line:
            return line[:200]
    return fallback


def load_documents(paths: Iterable[str | Path], kind: DocumentKind | str) -> list[Document]:
    """Ingest every file in ``paths`` (directories are expanded to *.txt / *.md)."""
    files: list[Path] = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix in (".txt", ".md")))
        else:
            files.append(p)
    docs: list[Document] = []
    seen: set[str] = set()
    for f in files:
        doc = ingest(f, kind)
        if doc.doc_id in seen:
            raise DuplicateDocument(doc.doc_id)
        seen.add(doc.doc_id)
        docs.append(doc)
    return docs


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

CLEAN_PASSES = (
    "strip-control-chars",
    "strip-formatting-artifacts",
    "remove-stopwords",
    "collapse-whitespace",
)
# Passes applied to reference text headed for extraction.  Stop-word removal is
# deliberately absent: extraction prompts need natural prose.
DOCUMENT_PASSES = frozenset({"strip-control-chars", "strip-formatting-artifacts", "collapse-whitespace"})

STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been
    before being below between both but by can could did do does doing down during
    each few for from further had has have having he her here hers herself him
    himself his how i if in into is it its itself just me more most my myself no nor
    not now of off on once only or other our ours ourselves out over own same she
    should so some such than that the their theirs them themselves then there these
    they this those through to too under until up very was we were what when where
    which while who whom why will with would you your yours yourself yourselves
    """.split()
)

_STOPWORD_RE = re.compile(r"\b(?:" + "|".join(sorted(STOPWORDS, key=len, reverse=True)) + r")\b", re.IGNORECASE)
_PAGE_MARK_RE = re.compile(
    r"^[ \t]*(?:[-–—~]+[ \t]*\d{1,4}[ \t]*[-–—~]+|page[ \t]+\d{1,4}(?:[ \t]+of[ \t]+\d{1,4})?)[ \t]*$",
    re.IGNORECASE,
)
_RULE_LINE_RE = re.compile(r"^[ \t]*([-=_*~])\1{2,}[ \t]*$")
_EMPHASIS_RE = re.compile(r"\*\*|__")
_HSPACE_RE = re.compile(r"[ \t\f\v]+")
_NEWLINES_RE = re.compile(r"\n{2,}")


def _strip_control(text: str) -> str:
    return "".join(
        ch for ch in text if ch in "\n\t" or unicodedata.category(ch) not in ("Cc", "Cf")
    )


def _strip_artifacts(text: str) -> str:
    kept = [
        line
        for line in text.splitlines(keepends=True)
        if not (_PAGE_MARK_RE.match(line.rstrip("\n")) or _RULE_LINE_RE.match(line.rstrip("\n")))
    ]
    return _EMPHASIS_RE.sub("", "".join(kept))


def _remove_stopwords(text: str) -> str:
    return _STOPWORD_RE.sub("", text)


def _collapse_whitespace(text: str) -> str:
    return _NEWLINES_RE.sub("\n", _HSPACE_RE.sub(" ", text))


_PASS_FUNCS = {
    "strip-control-chars": _strip_control,
    "strip-formatting-artifacts": _strip_artifacts,
    "remove-stopwords": _remove_stopwords,
    "collapse-whitespace": _collapse_whitespace,
}


def clean_text(text: str, passes: Iterable[str] = ()) -> str:
    """Apply the named cleaning passes in canonical order until nothing changes.

    Iterating to a fixed point is what makes the operation idempotent for every
    pass combination; e.g. removing a stop word can leave a line that only then
    looks like a page marker.
    """
    wanted = set(passes)
    unknown = wanted - set(CLEAN_PASSES)
    if unknown:
        raise ValueError(f"unknown cleaning pass(es): {sorted(unknown)}")
    funcs = [_PASS_FUNCS[name] for name in CLEAN_PASSES if name in wanted]
    if not funcs:
        return text
    while True:
        out = text
        for f in funcs:
            out = f(out)
        if out == text:
            return out
        text = out


def prepare_document(doc: Document, passes: Iterable[str] = DOCUMENT_PASSES) -> Document:
    """Return ``doc`` with a cleaned body (the body chunk spans refer to)."""
    body = clean_text(doc.body, passes).strip("\n")
    if not body.strip():
        raise EmptyDocument(f"{doc.doc_id} is empty after cleaning")
    return replace(doc, body=body)


def query_terms(text: str) -> list[str]:
    """Content terms of a query: stop words removed, lowercased, order kept."""
    cleaned = clean_text(text, {"strip-control-chars", "remove-stopwords", "collapse-whitespace"})
    return list(iter_words(cleaned))


# ---------------------------------------------------------------------------
# Glossary
# ---------------------------------------------------------------------------

_GLOSSARY_HEADER_RE = re.compile(
    r"^\s*(?:#{1,6}\s*)?(?:glossary(?:\s+of\s+terms)?|definitions|terms(?:\s+and\s+definitions)?)\s*:?\s*$",
    re.IGNORECASE,
)
_GLOSSARY_LINE_RE = re.compile(
    r"^\s*(?:[-*]\s+)?(?P<term>[^\s:][^:\n]{0,59}?)\s*(?::|\s[-–—]\s)\s*(?P<definition>\S.*?)\s*$"
)


def extract_glossary(document: Document) -> list[GlossaryEntry]:
    if document.kind is not DocumentKind.REFERENCE:
        raise ValueError("glossary extraction applies to reference documents only")
    merged: dict[str, list[str]] = {}
    in_section = False
    for line in document.body.split("\n"):
        if _GLOSSARY_HEADER_RE.match(line):
            in_section = True
            continue
        if not in_section:
            continue
        if not line.strip():
            continue
        m = _GLOSSARY_LINE_RE.match(line)
        if m is None or line.lstrip().startswith("#") or len(m.group("term").split()) > 6:
            in_section = False
            continue
        term, definition = m.group("term").strip(), m.group("definition")
        defs = merged.setdefault(term, [])
        if definition not in defs:
            defs.append(definition)
    return [GlossaryEntry(term, "; ".join(defs), document.doc_id) for term, defs in merged.items()]


def glossary_to_json(entries: Iterable[GlossaryEntry]) -> str:
    return json.dumps(
        [{"term": e.term, "definition": e.definition, "source_doc": e.source_doc} for e in entries],
        indent=2,
        ensure_ascii=False,
    )


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------


def chunk(
    document: Document,
    chunk_size_tokens: int = DEFAULT_CHUNK_SIZE,
    overlap_tokens: int = DEFAULT_CHUNK_OVERLAP,
) -> list[Chunk]:
    """Slide a token window over ``document.body``.

    A chunk covering tokens ``[a, b)`` spans the characters from the start of
    token ``a`` up to the start of token ``b``, so the whitespace after its last
    token belongs to it. The first chunk starts at offset 0 and the last one ends
    at ``len(body)``; together the spans tile the body with no gaps.
    """
    if chunk_size_tokens <= 0 or not 0 <= overlap_tokens < chunk_size_tokens:
        raise InvalidChunkConfig(
            f"need 0 <= overlap ({overlap_tokens}) < chunk size ({chunk_size_tokens})"
        )
    body = document.body
    spans = token_spans(body)
    n = len(spans)
    if n == 0:
        raise EmptyDocument(document.doc_id)
    chunks: list[Chunk] = []
    start = 0
    while True:
        end = min(start + chunk_size_tokens, n)
        c0 = 0 if start == 0 else spans[start][0]
        c1 = len(body) if end == n else spans[end][0]
        ordinal = len(chunks)
        chunks.append(
            Chunk(
                chunk_id=f"{document.doc_id}#{ordinal:04d}",
                doc_id=document.doc_id,
                ordinal=ordinal,
                text=body[c0:c1],
                token_count=end - start,
                char_span=(c0, c1),
            )
        )
        if end == n:
            return chunks
        start = end - overlap_tokens


def reconstruct(chunks: list[Chunk]) -> str:
    """Concatenate chunk texts with overlap regions dropped."""
    out: list[str] = []
    covered = 0
    for c in sorted(chunks, key=lambda c: c.ordinal):
        s, e = c.char_span
        out.append(c.text[covered - s:] if covered > s else c.text)
        covered = e
    return "".join(out)


def split_passages(document: Document) -> list[Passage]:
    passages: list[Passage] = []
    offset = 0
    for line in document.body.split("\n"):
        stripped = line.strip()
        if stripped:
            lead = len(line) - len(line.lstrip())
            start = offset + lead
            passages.append(
                Passage(
                    passage_id=f"{document.doc_id}:{len(passages) + 1}",
                    doc_id=document.doc_id,
                    text=stripped,
                    char_span=(start, start + len(stripped)),
                )
            )
        offset += len(line) + 1
    return passages


# ---------------------------------------------------------------------------
# Requirements
# ---------------------------------------------------------------------------

_FIELD_ALIASES = {name.lower(): name for name in STRUCTURED_FIELDS}
_FIELD_ALIASES["error handling"] = "ErrorHandling"
_FIELD_LINE_RE = re.compile(
    r"^\s*(?P<key>title|description|input|processing|output|error\s*handling|id|requirement id)\s*:\s*(?P<value>.*)$",
    re.IGNORECASE,
)


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "req"


def render_structured(fields: Mapping[str, str]) -> str:
    names = {"ErrorHandling": "Error Handling"}
    return "\n".join(f"{names.get(k, k)}: {fields[k]}" for k in STRUCTURED_FIELDS if k in fields)


def parse_structured_requirements(text: str) -> list[Requirement]:
    """Parse IEEE-830-style blocks (``Title: ...`` / ``Description: ...``)."""
    blocks: list[dict[str, str]] = []
    current: dict[str, str] | None = None
    last_key: str | None = None
    for line in text.split("\n"):
        m = _FIELD_LINE_RE.match(line)
        if m:
            key = m.group("key").lower()
            key = re.sub(r"\s+", " ", key)
            value = m.group("value").strip()
            if key in ("id", "requirement id"):
                key = "_id"
            else:
                key = _FIELD_ALIASES[key.replace("errorhandling", "error handling")]
            if key == "_id" or current is None or (key == "Title" and "Title" in current) or (
                key != "Title" and key in current
            ):
                current = {}
                blocks.append(current)
            current[key] = value
            last_key = key
        elif current is not None and last_key and line.strip():
            current[last_key] = f"{current[last_key]} {line.strip()}"
    reqs = []
    for block in blocks:
        req_id = block.pop("_id", None) or _slug(block.get("Title", "req"))
        if not block:
            continue
        reqs.append(Requirement(req_id=req_id, text=render_structured(block), structured_fields=block))
    return reqs


def load_requirements(path: str | Path) -> list[Requirement]:
    """Read a JSON-lines requirement set: ``{req_id, text, structured_fields?}``."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    reqs: list[Requirement] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        fields = obj.get("structured_fields") or None
        if fields:
            fields = {_FIELD_ALIASES.get(k.lower(), k): v for k, v in fields.items()}
        text = obj.get("text") or (render_structured(fields) if fields else "")
        req = Requirement(req_id=str(obj["req_id"]), text=text, structured_fields=fields)
        if req.req_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate req_id {req.req_id!r}")
        seen.add(req.req_id)
        reqs.append(req)
    return reqs
