import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neuromon.classifier import default_train_config, evaluate, train  # noqa: E402
from neuromon.sim import build_dataset, monitor_config_for, random_specs  # noqa: E402

TRAIN_TRACES = 200
TRAIN_SEED = 1


class TrainedDetectors:
    def __init__(self):
        start = time.perf_counter()
        self.specs = random_specs(TRAIN_TRACES, seed=TRAIN_SEED)
        self.config = monitor_config_for(self.specs[0])
        self.datasets = build_dataset(self.specs, self.config, seed=TRAIN_SEED)
        self.models, self.metrics = {}, {}
        for level, d in self.datasets.items():
            model, _ = train(d.X_train, d.y_train, level, default_train_config(level),
                             probe_digest=self.config.probes.digest)
            self.models[level] = model
            self.metrics[level] = evaluate(model, d.X_test, d.y_test)
        self.seconds = time.perf_counter() - start


@pytest.fixture(scope="session")
def detectors():
    """Detectors trained once per session on simulated traces."""
    return TrainedDetectors()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda x: int(x.split()[0][2:])):
            terminalreporter.write_line(line)
