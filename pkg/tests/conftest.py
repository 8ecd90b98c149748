import re
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cellsegkit.synth import CorpusSpec, generate_corpus  # noqa: E402
from cellsegkit.trainer import TrainConfig, train  # noqa: E402

SMOKE_SPEC = CorpusSpec(n_train=50, n_val=20, n_test=20, seed=42)
SMOKE_CFG = TrainConfig(epochs=3, seed=0)


@pytest.fixture(scope="session")
def smoke_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke_corpus")
    generate_corpus(SMOKE_SPEC, root)
    return root


@pytest.fixture(scope="session")
def smoke_run(smoke_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke_run")
    return train(SMOKE_CFG, smoke_corpus, out), out


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Default corpus and default config, timed end to end."""
    t0 = time.perf_counter()
    corpus = tmp_path_factory.mktemp("desk_corpus")
    generate_corpus(CorpusSpec(), corpus)
    out = tmp_path_factory.mktemp("desk_run")
    report = train(TrainConfig(), corpus, out)
    return {"report": report, "corpus": corpus, "out": out, "seconds": time.perf_counter() - t0}


_criteria = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = _criteria.get(n, "PASS")
        _criteria[n] = "PASS" if report.outcome == "passed" and prev == "PASS" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n}: {_criteria[n]}")
