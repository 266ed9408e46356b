from __future__ import annotations

from pathlib import Path

import pytest

from abshorizon.env import load_map_file

PKG = Path(__file__).resolve().parents[1] / "src" / "abshorizon"
MAPS = PKG / "maps"
CONFIGS = PKG / "configs"
TASKS = PKG / "tasks"


def fixture_map(name: str, **overrides):
    spec = load_map_file(MAPS / f"{name}.map")
    return spec.with_changes(**overrides) if overrides else spec


@pytest.fixture
def tworoom():
    return fixture_map("tworoom")


@pytest.fixture
def falltrap():
    return fixture_map("falltrap")


@pytest.fixture(scope="session")
def corridor_run():
    """A corridor run trained to full coverage; tests must deep-copy before mutating."""
    from abshorizon.harness import advance, load_config, start_run

    run = start_run(load_config(CONFIGS / "corridor.cfg"), 0)
    advance(run, 10_000)
    assert run.covered
    return run


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
