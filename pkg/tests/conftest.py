import socket
import sys
from pathlib import Path

import pytest

from reqtrace.cli import main

FIXTURES = Path(__file__).parent / "fixtures"
SYNTHETIC = FIXTURES / "synthetic"
CONFIG = SYNTHETIC / "config.yaml"


@pytest.fixture
def no_network(monkeypatch):
    """Any attempt to open a connection fails and is recorded."""
    attempts = []

    def refuse(*args, **kwargs):
        attempts.append(args)
        raise OSError("network access is disabled in this test")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    monkeypatch.setattr(socket, "getaddrinfo", refuse)
    return attempts


@pytest.fixture(scope="session")
def built(tmp_path_factory):
    """Output directory holding a replay-built index of the synthetic corpus."""
    out = tmp_path_factory.mktemp("built")
    assert main(["build-index", "-c", str(CONFIG), "-o", str(out)]) == 0
    return out


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
