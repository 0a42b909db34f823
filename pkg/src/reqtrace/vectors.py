"""Vector helpers shared by ranking and retrieval."""

from __future__ import annotations

import math
from typing import Sequence

from .errors import DimensionMismatch, ZeroVector
from .llm import EmbeddingVector


def _values(v: EmbeddingVector | Sequence[float]) -> Sequence[float]:
    return v.values if isinstance(v, EmbeddingVector) else v


def cosine_similarity(u: EmbeddingVector | Sequence[float], v: EmbeddingVector | Sequence[float]) -> float:
    """Cosine of the angle between ``u`` and ``v``, clamped into [-1, 1]."""
    a, b = _values(u), _values(v)
    if len(a) != len(b):
        raise DimensionMismatch(f"dimension {len(a)} != {len(b)}")
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(x * x for x in b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    dot = math.fsum(x * y for x, y in zip(a, b))
    return max(-1.0, min(1.0, dot / (na * nb)))
