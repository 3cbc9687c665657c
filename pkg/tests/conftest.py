import numpy as np
import pytest

from canvolt import fleets
from canvolt.bus import run_scenario
from canvolt.pipeline import PipelineParams, learn_fleet


@pytest.fixture(scope="session")
def sedan():
    cfg = fleets.preset("sedan")
    return cfg, run_scenario(cfg, 0, 30.0)


@pytest.fixture(scope="session")
def sedan_fleet(sedan):
    cfg, sim = sedan
    return learn_fleet(sim.trace, cfg, PipelineParams(), keep_history=True)


@pytest.fixture(scope="session")
def prototype():
    cfg = fleets.preset("prototype")
    return cfg, run_scenario(cfg, 0, 60.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Log one acceptance line; the test still asserts on its own."""
    def _record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return bool(ok)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
