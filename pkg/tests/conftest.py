import numpy as np
import pytest

from ionolink.pipeline import CalibrationBundle, calibrate


@pytest.fixture(scope="session")
def bundle_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("bundle") / "bundle.json"
    calibrate(seed=0).save(path)
    return path


@pytest.fixture(scope="session")
def bundle(bundle_path):
    return CalibrationBundle.load(bundle_path)


@pytest.fixture
def rng():
    return np.random.default_rng(20240906)


STRESS = {"event": "impulsive", "a_scale_tecu": 8.4, "elevation_deg": 30.0, "cn0_dbhz": 49.0, "seed": 123}


@pytest.fixture(scope="session")
def stress_run(bundle):
    """Stress trace replayed once with every policy; wall time kept for budget checks."""
    import time

    from ionolink.pipeline import event_trace, replay
    from ionolink.policies import POLICIES

    t0 = time.perf_counter()
    tr = event_trace(STRESS["event"], bundle.scenario, STRESS["a_scale_tecu"], STRESS["elevation_deg"], STRESS["cn0_dbhz"], STRESS["seed"])
    logs = replay(tr, bundle, tuple(POLICIES), cn0_dbhz=STRESS["cn0_dbhz"])
    return tr, logs, time.perf_counter() - t0


_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one verdict line per acceptance criterion."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE.append((criterion, ok, detail))
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(_ACCEPTANCE, key=lambda r: (int(r[0].split(".")[0].rstrip("ab")), r[0])):
        terminalreporter.write_line(f"criterion {criterion:4s} {'PASS' if ok else 'FAIL'}  {detail}")
