from __future__ import annotations

import numpy as np
import pytest

from brainorch.registry import TaskId, builtin_catalog, load_catalog

from fixtures_e2e import (
    build_mock_engine,
    e2e_affine,
    write_catalog_override,
    write_subject,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gli_subject(tmp_path):
    return write_subject(tmp_path, "sub-01", task=TaskId.GLI_PRE)


@pytest.fixture
def mock_engine():
    return build_mock_engine(max_concurrent_jobs=4)


@pytest.fixture
def override_catalog(tmp_path):
    path = write_catalog_override(tmp_path / "catalog.json")
    return load_catalog(path)


@pytest.fixture
def stock_catalog():
    return builtin_catalog()


@pytest.fixture
def identity_affine():
    def _make(spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
        affine[:3, 3] = origin
        return affine

    return _make


@pytest.fixture
def shifted_affine():
    return e2e_affine()


# ---------------------------------------------------------------------------
# Acceptance reporting: one PASS/FAIL line per criterion in the summary.

_acceptance_results: dict[str, tuple[str, float]] = {}


def pytest_runtest_logreport(report):
    nodeid = report.nodeid
    if "test_acceptance.py::test_c" not in nodeid:
        return
    name = nodeid.split("::")[-1]
    if report.when == "call":
        outcome = "PASS" if report.outcome == "passed" else "FAIL"
        _acceptance_results[name] = (outcome, report.duration)
    elif report.when == "setup" and report.outcome != "passed":
        _acceptance_results[name] = ("FAIL", report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance_results):
        outcome, duration = _acceptance_results[name]
        terminalreporter.write_line(f"[ACCEPTANCE] {name}: {outcome} ({duration:.2f}s)")
