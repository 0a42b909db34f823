"""Deterministic rule-based tokenizer.

Token counts drive chunk sizes and prompt budgets, so they must not depend on
whatever tokenizer happens to be installed on the machine. The rules below are
frozen under ``TOKENIZER_VERSION``; any change to them must bump the version,
because persisted chunk ids and manifests embed it.
"""

from __future__ import annotations

import re
from typing import Iterator

TOKENIZER_VERSION = "rx-word-1"

# A word run (letters, digits, underscore) or a single non-space symbol.
# Word runs longer than MAX_PIECE are cut into fixed-width pieces so a single
# pathological "word" (base64, a URL) cannot blow a chunk budget.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
MAX_PIECE = 16


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character spans ``[start, end)`` of every token in ``text``."""
    spans: list[tuple[int, int]] = []
    for m in _TOKEN_RE.finditer(text):
        start, end = m.span()
        while end - start > MAX_PIECE:
            spans.append((start, start + MAX_PIECE))
            start += MAX_PIECE
        spans.append((start, end))
    return spans


def tokenize(text: str) -> list[str]:
    return [text[s:e] for s, e in token_spans(text)]


def count_tokens(text: str) -> int:
    return len(token_spans(text))


def iter_words(text: str) -> Iterator[str]:
    """Lowercased word runs, used for term extraction and hashing embeddings."""
    for m in re.finditer(r"\w+(?:\.\w+)*", text):
        yield m.group(0).lower()


def truncate_to_tokens(text: str, budget: int) -> str:
    """Longest prefix of ``text`` holding at most ``budget`` tokens."""
    spans = token_spans(text)
    if len(spans) <= budget:
        return text
    if budget <= 0:
        return ""
    return text[: spans[budget - 1][1]]
