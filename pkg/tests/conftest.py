import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def dialogue_row(cid, texts, mentions, origin=None):
    row = {"conversationId": cid,
           "messages": [{"senderWorkerId": str(i % 2), "text": t} for i, t in enumerate(texts)],
           "movieMentions": mentions}
    if origin:
        row["origin"] = origin
    return row


@pytest.fixture
def data_dir():
    return DATA


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running benchmark")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS, key=str):
        terminalreporter.write_line(mod.RESULTS[key])
