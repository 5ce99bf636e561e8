import pytest

from tripletnids.data import make_blobs, stratified_split
from tripletnids.harness import ExperimentConfig

TINY = {"lr": 3e-3, "batch_size": 32, "weight_decay": 1e-4, "neurons": 16, "depth": 1, "dropout": 0.1,
        "f_out": 4, "margin": 0.5, "k": 3}


@pytest.fixture(scope="session")
def blob_splits():
    ds = make_blobs([240, 40, 40], 5, 6.0, 7)
    return stratified_split(ds, 0.5, 39058032)


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig(name="tiny", repetitions=1, n_benign=60, n_per_attack=(5,), folds=2, budget=2,
                            epochs=2, fixed=dict(TINY))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
