import os
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

from cyclevos.data import generate_suite
from cyclevos.experiments import BenchConfig, train_arms, tune_alpha

CACHE = Path(os.environ.get("CYCLEVOS_BENCH_CACHE", Path(__file__).resolve().parents[1] / ".bench_cache"))

# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return passed


@pytest.fixture(scope="session")
def bench():
    """Paired-seed checkpoints (trained once, then cached) and the validation-tuned correction step."""
    cfg = BenchConfig()
    suite = generate_suite(cfg.suite)
    models = train_arms(cfg, suite, root=CACHE)
    start = time.perf_counter()
    alpha, sweep = tune_alpha(cfg, models, suite["val"])
    return SimpleNamespace(cfg=cfg, suite=suite, models=models, alpha=alpha, sweep=sweep,
                           tune_seconds=time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
