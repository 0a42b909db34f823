import json
import sys

import pytest
from conftest import CONFIG, FIXTURES, SYNTHETIC

from reqtrace import cli
from reqtrace.cli import main
from reqtrace.config import RunConfig, load_config
from reqtrace.corpus import Requirement
from reqtrace.errors import ConfigError, PipelineError
from reqtrace.graph import load_graph
from reqtrace.llm import LLMGateway, ScriptedChat
from reqtrace.pipeline import RunState, check_requirement, cmd_build_index, load_index, make_gateway
from reqtrace.reasoner import Strategy


def _args(out, *extra):
    return ["-c", str(CONFIG), "-o", str(out), *extra]


# -- configuration ----------------------------------------------------------------------


def test_defaults():
    cfg = RunConfig().validate()
    assert cfg.threshold == 0.7
    assert cfg.seed == 0
    assert cfg.strategies == ["io", "cot", "tot"]


def test_precedence_file_then_flags(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("threshold: 0.8\nseed: 4\nstrategies: [io]\nreferences: [refs]\ngateway:\n  mode: record\n")
    cfg = load_config(path)
    assert (cfg.threshold, cfg.seed, cfg.strategies, cfg.gateway.mode) == (0.8, 4, ["io"], "record")
    assert cfg.references == [str(tmp_path / "refs")]
    cfg = load_config(path, {"threshold": 0.75, "strategies": "cot,tot", "gateway": {"mode": "replay"}})
    assert (cfg.threshold, cfg.seed, cfg.strategies, cfg.gateway.mode) == (0.75, 4, ["cot", "tot"], "replay")


@pytest.mark.parametrize(
    "text",
    ["threshold: 1.5\n", "modes: [sparse]\n", "strategies: []\n", "colour: blue\n", "gateway:\n  api_key: sk-123\n"],
)
def test_bad_config(tmp_path, text):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_secret_comes_from_environment(monkeypatch):
    captured = {}

    class Recorder:
        def __init__(self, base_url, api_key="", **kw):
            captured["key"] = api_key

    monkeypatch.setattr("reqtrace.llm.OpenAICompatibleProvider", Recorder)
    monkeypatch.setenv("FIXTURE_KEY", "sk-from-env")
    cfg = load_config(None, {"gateway": {"mode": "live", "api_key_env": "FIXTURE_KEY"}})
    make_gateway(cfg)
    assert captured["key"] == "sk-from-env"


def test_manifest_config_has_no_paths_or_secrets():
    cfg = load_config(CONFIG)
    data = cfg.to_json()
    assert data["references"] == ["references"]
    assert "output_dir" not in data and "cache_path" not in data["gateway"]
    assert str(SYNTHETIC) not in json.dumps(data)


# -- exit codes -------------------------------------------------------------------------


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["evaluate", "--strategies"]) == 2
    assert main(["frobnicate"]) == 2


def test_missing_corpus_path_fails_before_any_call(tmp_path):
    calls = ScriptedChat(lambda r: "never")
    cfg = load_config(CONFIG, {"output_dir": str(tmp_path), "references": [str(tmp_path / "absent")]})
    gw = LLMGateway("live", chat_provider=calls)
    with pytest.raises(ConfigError, match="references"):
        cmd_build_index(cfg, gw, RunState(tmp_path / "m.json", "build-index"))
    assert calls.requests == []
    assert main(["build-index", *_args(tmp_path), "--references", str(tmp_path / "absent")]) == 2


def test_check_srs008_non_compliant(built, no_network, capsys):
    assert main(["check", "SRS008", *_args(built)]) == 3
    out = capsys.readouterr().out
    assert "Label: NonCompliant" in out
    assert "flight_control:2" in out
    assert no_network == []


def test_check_compliant_json(built, no_network, capsys):
    assert main(["check", "SRS001", "--json", "--strategy", "cot", *_args(built)]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["label"] == "Compliant"
    assert data["threshold"] == 0.7
    assert data["retrieval"][0]["passage_id"] == "payment_security:2"


def test_check_irrelevant_makes_no_chat_call(built, no_network, capsys):
    assert main(["check", "SRS010", *_args(built)]) == 4
    cfg = load_config(CONFIG, {"output_dir": str(built)})
    gw = make_gateway(cfg)
    result, decision = check_requirement(
        cfg, load_index(cfg), gw, Requirement("SRS010", "The mobile app shall display the home dashboard in a dark colour theme."),
        Strategy.TOT, "graph",
    )
    assert result.items == () and decision.verdict is None
    tags = set(gw.cost_report()["by_tag"])
    assert tags <= {"rank", "retrieve"}


def test_check_unknown_id(built, capsys):
    assert main(["check", "SRS999", *_args(built)]) == 2
    assert "unknown requirement id" in capsys.readouterr().err


def test_check_without_index(tmp_path, capsys):
    assert main(["check", "SRS001", *_args(tmp_path)]) == 1
    assert "build-index" in capsys.readouterr().err


def test_inspect_graph(built, tmp_path, capsys):
    gml = tmp_path / "g.graphml"
    assert main(["inspect-graph", *_args(built), "--graphml", str(gml)]) == 0
    data = json.loads(capsys.readouterr().out)
    counts = json.loads((SYNTHETIC / "build_counts.json").read_text())
    assert data["nodes"] == counts["nodes"] and data["edges"] == counts["edges"]
    assert [lv["communities"] for lv in data["levels"]] == counts["communities_per_level"]
    assert gml.read_text().startswith("<?xml")


def test_ingest(tmp_path, capsys):
    assert main(["ingest", *_args(tmp_path)]) == 0
    counts = json.loads(capsys.readouterr().out)
    assert counts == {"chunks": 10, "documents": 3, "glossary_terms": 2, "passages": 17}
    corpus = json.loads((tmp_path / "corpus.json").read_text())
    assert {g["term"] for g in corpus["glossary"]} == {"AES-256", "TLS"}


def test_build_manifest_matches_golden_counts(built):
    manifest = json.loads((built / "build_manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["counts"] == json.loads((SYNTHETIC / "build_counts.json").read_text())
    assert manifest["completed"] == ["ingest", "extract", "summarize-elements", "graph", "community-reports", "persist"]
    assert manifest["cost"]["total"]["replay_hits"] == manifest["cost"]["total"]["calls"]


def test_build_is_byte_identical(built, tmp_path, no_network):
    assert main(["build-index", *_args(tmp_path)]) == 0
    assert (tmp_path / "graph.json").read_bytes() == (built / "graph.json").read_bytes()
    assert load_graph(tmp_path / "graph.json").graph == load_graph(built / "graph.json").graph


# -- evaluate and report -------------------------------------------------------------------


@pytest.fixture
def evaluated(built, tmp_path):
    for name in ("graph.json",):
        (tmp_path / name).write_bytes((built / name).read_bytes())
    return tmp_path


def test_evaluate_strategy_subset_and_sweep(evaluated, no_network, capsys):
    assert main(["evaluate", *_args(evaluated), "--strategies", "io", "--modes", "graph", "--sweep"]) == 0
    md = (evaluated / "report.md").read_text()
    assert "| Configuration | IO P | IO R | IO F1 |" in md
    assert "CoT" not in md and "ToT" not in md
    rows = (evaluated / "coverage.csv").read_text().splitlines()
    assert rows[0] == "threshold,graph"
    assert [r.split(",")[0] for r in rows[1:]] == [f"{0.5 + 0.05 * i:.2f}" for i in range(10)]
    printed = capsys.readouterr().out.split()
    assert all(p.startswith(str(evaluated)) for p in printed)


def test_evaluate_without_sweep_has_no_coverage(evaluated, no_network):
    assert main(["evaluate", *_args(evaluated), "--strategies", "io"]) == 0
    assert not (evaluated / "coverage.csv").exists()
    manifest = json.loads((evaluated / "run_manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["threshold"] == 0.7


def test_report_command(evaluated, no_network, capsys):
    assert main(["evaluate", *_args(evaluated), "--strategies", "io,cot"]) == 0
    verdicts = sorted(str(p) for p in evaluated.glob("verdicts-*.jsonl"))
    capsys.readouterr()
    assert main(["report", *_args(evaluated), "--verdicts", *verdicts, "--format", "json"]) == 0
    data = json.loads(capsys.readouterr().out)
    evaluated_json = json.loads((evaluated / "report.json").read_text())
    assert data["rows"] == evaluated_json["rows"]


def test_failure_leaves_partial_manifest(evaluated, monkeypatch):
    def broken(cfg, gateway, state, sweep=False):
        state.done("retrieve-graph")
        raise PipelineError("reason-graph", RuntimeError("provider exploded"))

    monkeypatch.setattr(cli, "cmd_evaluate", broken)
    assert main(["evaluate", *_args(evaluated)]) == 1
    manifest = json.loads((evaluated / "run_manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["failed_stage"] == "reason-graph"
    assert manifest["completed"] == ["retrieve-graph"]


def test_interrupt_flushes_manifest(evaluated, monkeypatch):
    def interrupted(cfg, gateway, state, sweep=False):
        state.done("retrieve-graph")
        raise KeyboardInterrupt

    monkeypatch.setattr(cli, "cmd_evaluate", interrupted)
    assert main(["evaluate", *_args(evaluated)]) == 130
    manifest = json.loads((evaluated / "run_manifest.json").read_text())
    assert manifest["status"] == "interrupted"
    assert manifest["completed"] == ["retrieve-graph"]


def test_logs_stay_off_stdout(built, capsys):
    assert main(["check", "SRS002", "--json", "-vv", *_args(built)]) == 0
    captured = capsys.readouterr()
    assert json.loads(captured.out)["label"] == "Compliant"
    assert "INFO" not in captured.out and "WARNING" not in captured.out


def test_fixture_generator_is_reproducible(tmp_path):
    sys.path.insert(0, str(FIXTURES))
    try:
        import make_cache
    finally:
        sys.path.remove(str(FIXTURES))
    cache = make_cache.generate(tmp_path / "cache.jsonl", tmp_path / "counts.json")
    assert cache.read_bytes() == (SYNTHETIC / "cache.jsonl").read_bytes()
    assert (tmp_path / "counts.json").read_bytes() == (SYNTHETIC / "build_counts.json").read_bytes()
