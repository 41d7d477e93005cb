import os

import pytest

from casdc.harness import ExperimentConfig, run_experiment

_VERDICTS = []


class Verdicts:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def record(self, name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return passed


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)


class RunCache:
    """Runs each distinct experiment once per session; keyed by config hash."""

    def __init__(self, root):
        self.root = root
        self.reports = {}

    def run(self, **dotted):
        cfg = ExperimentConfig().replace(**{"eval.plots": False, **dotted})
        key = cfg.config_hash()
        if key not in self.reports:
            cfg = cfg.replace(output_dir=str(self.root / key), jobs=int(os.environ.get("CASDC_JOBS", "1")))
            self.reports[key] = run_experiment(cfg)
        return self.reports[key]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return RunCache(tmp_path_factory.mktemp("runs"))

