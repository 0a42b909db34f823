"""Record the synthetic corpus replay cache.

Runs build-index and evaluate (with the threshold sweep) in record mode,
answering chat requests with the rule-based fixture model and embeddings with
the hashing embedder, then compacts the cache so its bytes do not depend on
thread scheduling.

    python3 tests/fixtures/make_cache.py [CACHE_PATH]
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

import fixture_llm  # noqa: E402

from reqtrace.config import load_config  # noqa: E402
from reqtrace.llm import ScriptedChat  # noqa: E402
from reqtrace.pipeline import RunState, cmd_build_index, cmd_evaluate, make_gateway  # noqa: E402

SYNTHETIC = HERE / "synthetic"
CONFIG = SYNTHETIC / "config.yaml"
CACHE = SYNTHETIC / "cache.jsonl"
COUNTS = SYNTHETIC / "build_counts.json"


def generate(cache_path: Path = CACHE, counts_path: Path = COUNTS) -> Path:
    """Write the cache and the build counts it produces; returns the cache path."""
    cache_path = Path(cache_path)
    if cache_path.exists():
        cache_path.unlink()
    with tempfile.TemporaryDirectory() as out:
        cfg = load_config(CONFIG, {"output_dir": out, "gateway": {"mode": "record", "cache_path": str(cache_path)}})
        gateway = make_gateway(cfg, ScriptedChat(fixture_llm.respond))
        build = RunState(Path(out) / "build.json", "build-index")
        cmd_build_index(cfg, gateway, build)
        Path(counts_path).write_text(json.dumps(build.data["counts"], sort_keys=True, indent=2) + "\n", encoding="utf-8")
        cmd_evaluate(cfg, gateway, RunState(Path(out) / "run.json", "evaluate"), sweep=True)
        gateway.cache.compact()
    return cache_path


if __name__ == "__main__":
    print(generate(Path(sys.argv[1]) if len(sys.argv) > 1 else CACHE))
