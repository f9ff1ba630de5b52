import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, one-line detail); filled by test_acceptance.py
CRITERIA: dict[int, tuple[bool | None, str]] = {}


def record(number: int, passed: bool | None, detail: str) -> None:
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        status = "INFO" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")


@pytest.fixture(scope="session")
def desk_experiment(tmp_path_factory):
    """The bundled desk experiment (seeds 0-2), run once per session.

    Returns the loaded config plus per-seed wall-clock seconds for training
    and scoring.
    """
    from t3po import datakit, runner

    base = tmp_path_factory.mktemp("desk")
    cfg = runner.ExperimentConfig.load("experiments/desk.json")
    cfg.base_dir = base
    runner.cmd_make_splits(cfg)
    loader = datakit.TileLoader()
    seconds = {}
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        runner.cmd_train(cfg, seed, loader=loader)
        for scorer in cfg.scorers:
            runner.cmd_score(cfg, seed, scorer, loader=loader)
        seconds[seed] = time.perf_counter() - t0
    return cfg, seconds
