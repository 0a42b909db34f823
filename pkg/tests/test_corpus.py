import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reqtrace.corpus import (
    CLEAN_PASSES,
    Document,
    DocumentKind,
    chunk,
    clean_text,
    extract_glossary,
    ingest,
    load_requirements,
    parse_structured_requirements,
    prepare_document,
    query_terms,
    reconstruct,
    split_passages,
)
from reqtrace.errors import EmptyDocument, InvalidChunkConfig, UnreadableFile
from reqtrace.tokenizer import token_spans


def _doc(body, kind=DocumentKind.REFERENCE, doc_id="d"):
    return Document(doc_id=doc_id, title="t", body=body, kind=kind)


def test_ingest_normalizes_newlines(tmp_path):
    p = tmp_path / "a.txt"
    p.write_bytes(b"A\r\nB")
    doc = ingest(p, "reference")
    assert doc.body == "A\nB"
    assert doc.doc_id == "a"
    assert doc.kind is DocumentKind.REFERENCE


def test_ingest_empty_file(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_bytes(b"")
    with pytest.raises(EmptyDocument):
        ingest(p, "reference")


def test_ingest_missing_file(tmp_path):
    with pytest.raises(UnreadableFile):
        ingest(tmp_path / "nope.txt", "reference")


def test_ingest_lossy_decoding(tmp_path, caplog):
    p = tmp_path / "latin.txt"
    p.write_bytes(b"caf\xe9 shall")
    doc = ingest(p, "reference")
    assert "�" in doc.body
    assert "not valid UTF-8" in caplog.text


TABLE1 = """Title: Bank Account Validation
Description: Validate the bank account entered by the customer.
Input: Account number, bank name
Processing: The bank account information is checked against an internal database. If the account matches a record in the internal database, it is considered valid.
Output: Confirmation of account validity or invalidity.
Error Handling: If there is a communication issue with the bank interface, the system proceeds without notifying the customer.
"""


def test_requirement_document_with_table1_record(tmp_path):
    p = tmp_path / "srs_broker.txt"
    p.write_text(TABLE1)
    doc = ingest(p, DocumentKind.REQUIREMENT)
    assert doc.kind is DocumentKind.REQUIREMENT
    [req] = parse_structured_requirements(doc.body)
    assert req.req_id == "bank-account-validation"
    assert req.structured_fields["Title"] == "Bank Account Validation"
    assert req.structured_fields["Input"] == "Account number, bank name"
    assert req.structured_fields["ErrorHandling"].startswith("If there is a communication issue")
    assert set(req.structured_fields) == {"Title", "Description", "Input", "Processing", "Output", "ErrorHandling"}


def test_structured_requirements_with_ids():
    text = "ID: R1\nTitle: One\nDescription: first\n\nID: R2\nTitle: Two\nOutput: x\n  continued"
    reqs = parse_structured_requirements(text)
    assert [r.req_id for r in reqs] == ["R1", "R2"]
    assert reqs[1].structured_fields["Output"] == "x continued"


def test_load_requirements_jsonl(tmp_path):
    p = tmp_path / "reqs.jsonl"
    rows = [
        {"req_id": "SRS008", "text": "System Initialization shall synchronize the FCP virtual group."},
        {"req_id": "B1", "structured_fields": {"Title": "Bank Account Validation", "Error Handling": "retry"}},
    ]
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    reqs = load_requirements(p)
    assert reqs[0].text.startswith("System Initialization")
    assert reqs[1].structured_fields == {"Title": "Bank Account Validation", "ErrorHandling": "retry"}
    assert "Error Handling: retry" in reqs[1].text


def test_requirement_rejects_unknown_field():
    from reqtrace.corpus import Requirement

    with pytest.raises(ValueError):
        Requirement("x", "text", {"Priority": "high"})


# -- clean_text ----------------------------------------------------------------


def test_collapse_whitespace_example():
    assert clean_text("a\t\tb \n\n c", {"collapse-whitespace"}) == "a b \n c"


def test_formatting_artifacts_removed():
    text = "Start Up shall (3.3.2.12) synchronize its FCP.\n— 14 —\nPage 3 of 10\n-----\nControl flow shall be similar."
    out = clean_text(text, {"strip-formatting-artifacts"})
    assert out == "Start Up shall (3.3.2.12) synchronize its FCP.\nControl flow shall be similar."


def test_empty_pass_set_is_identity():
    s = "  weird\x00 text\t\n\n— 3 —"
    assert clean_text(s, ()) == s


def test_control_chars_removed():
    assert clean_text("a\x00b\x1fc​d\n\te", {"strip-control-chars"}) == "abcd\n\te"


def test_stopwords_only_on_request():
    assert query_terms("The system shall validate the account") == ["system", "shall", "validate", "account"]


pass_sets = st.sets(st.sampled_from(CLEAN_PASSES))
noisy_text = st.text(
    alphabet=st.sampled_from(list("ab the of\t\n -—14Page*_=~\x00\x0b​.:")),
    max_size=80,
)


@settings(max_examples=400, deadline=None)
@given(noisy_text, pass_sets)
def test_clean_text_idempotent_and_shrinking(text, passes):
    once = clean_text(text, passes)
    assert clean_text(once, passes) == once
    assert len(once) <= len(text)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=200), pass_sets)
def test_clean_text_idempotent_arbitrary_unicode(text, passes):
    once = clean_text(text, passes)
    assert clean_text(once, passes) == once
    assert len(once) <= len(text)


# -- glossary ------------------------------------------------------------------


def test_glossary_extraction():
    doc = _doc("FTPP Requirements\nGlossary:\nFCP: Fault-tolerant Core Processor\n# Scope\nText.")
    entries = extract_glossary(doc)
    assert [(e.term, e.definition) for e in entries] == [("FCP", "Fault-tolerant Core Processor")]
    assert entries[0].source_doc == "d"


def test_glossary_absent():
    assert extract_glossary(_doc("No glossary here.\nFCP: not in a section")) == []


def test_glossary_duplicates_merged():
    doc = _doc("Definitions\nFCP: Fault-tolerant Core Processor\nFCP: Fault-tolerant Core Processor\nNE: Network Element")
    entries = extract_glossary(doc)
    assert [(e.term, e.definition) for e in entries] == [
        ("FCP", "Fault-tolerant Core Processor"),
        ("NE", "Network Element"),
    ]


def test_glossary_terms_present_in_source():
    body = "## Terms and Definitions\n- KYC - Know your customer\nOTP: One-time password\nThe broker shall do things.\nGlossary\nVG: virtual group"
    doc = _doc(body)
    entries = extract_glossary(doc)
    assert {e.term for e in entries} == {"KYC", "OTP", "VG"}
    for e in entries:
        assert e.term in body


def test_glossary_requires_reference_kind():
    with pytest.raises(ValueError):
        extract_glossary(_doc("Glossary:\nA: b", kind=DocumentKind.REQUIREMENT))


# -- chunking ------------------------------------------------------------------

TEN = "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9"


def _token_ranges(doc, chunks):
    spans = token_spans(doc.body)
    out = []
    for c in chunks:
        first = next(i for i, (s, e) in enumerate(spans) if s >= c.char_span[0])
        out.append((first, first + c.token_count))
    return out


def test_chunk_arithmetic_example():
    doc = _doc(TEN)
    chunks = chunk(doc, 4, 1)
    assert _token_ranges(doc, chunks) == [(0, 4), (3, 7), (6, 10)]
    assert [c.ordinal for c in chunks] == [0, 1, 2]
    assert chunks[0].text == "t0 t1 t2 t3 "
    assert chunks[-1].text == "t6 t7 t8 t9"


def test_chunk_short_document():
    doc = _doc("one two three four")
    chunks = chunk(doc, 8, 2)
    assert len(chunks) == 1
    assert chunks[0].text == doc.body
    assert chunks[0].token_count == 4


def test_chunk_invalid_config():
    with pytest.raises(InvalidChunkConfig):
        chunk(_doc(TEN), 4, 4)
    with pytest.raises(InvalidChunkConfig):
        chunk(_doc(TEN), 0, 0)


words = st.lists(st.text(alphabet="abc.,(1 \n", min_size=1, max_size=6), min_size=1, max_size=60)


@settings(max_examples=300, deadline=None)
@given(words, st.integers(1, 12), st.data())
def test_chunk_invariants(parts, size, data):
    body = " ".join(parts)
    if not token_spans(body):
        return
    overlap = data.draw(st.integers(0, size - 1))
    doc = _doc(body)
    chunks = chunk(doc, size, overlap)
    assert reconstruct(chunks) == body
    assert chunks[0].char_span[0] == 0 and chunks[-1].char_span[1] == len(body)
    for c in chunks:
        assert 0 < c.token_count <= size
        assert body[c.char_span[0]:c.char_span[1]] == c.text
    ranges = _token_ranges(doc, chunks)
    for (a0, a1), (b0, b1) in zip(ranges, ranges[1:]):
        assert a1 - b0 == overlap
    assert chunk(doc, size, overlap) == chunks


def test_prepare_document_and_passages():
    raw = _doc("Title line\n\n\n  First   clause (1.1).\n— 2 —\nSecond clause.\n")
    doc = prepare_document(raw)
    assert doc.body == "Title line\n First clause (1.1).\nSecond clause."
    passages = split_passages(doc)
    assert [p.text for p in passages] == ["Title line", "First clause (1.1).", "Second clause."]
    assert [p.passage_id for p in passages] == ["d:1", "d:2", "d:3"]
    for p in passages:
        assert doc.body[p.char_span[0]:p.char_span[1]] == p.text
