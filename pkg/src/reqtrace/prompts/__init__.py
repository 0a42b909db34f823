"""Prompt templates, stored as text files next to this module.

Templates use ``str.format`` placeholders; literal braces are doubled. The
version string combines ``PROMPT_SET_VERSION`` with a digest of every file so
that manifests record exactly which wording produced a run.
"""

from __future__ import annotations

import hashlib
import string
from functools import lru_cache
from pathlib import Path

PROMPT_SET_VERSION = "1"
_DIR = Path(__file__).parent


@lru_cache(maxsize=None)
def load(name: str) -> str:
    return (_DIR / f"{name}.txt").read_text(encoding="utf-8")


def placeholders(name: str) -> set[str]:
    return {field for _, field, _, _ in string.Formatter().parse(load(name)) if field}


def render(name: str, **values: object) -> str:
    template = load(name)
    missing = placeholders(name) - set(values)
    if missing:
        raise KeyError(f"template {name!r} missing value(s) for {sorted(missing)}")
    return template.format(**values)


def version() -> str:
    digest = hashlib.sha256()
    for path in sorted(_DIR.glob("*.txt")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"{PROMPT_SET_VERSION}-{digest.hexdigest()[:12]}"
