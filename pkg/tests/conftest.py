import os
from pathlib import Path

import pytest

# criterion number -> (passed, one-line detail), filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def ref_cache(tmp_path_factory) -> Path:
    """Directory for cached reference solutions, shared by the whole session.

    Set CDAIPY_REFERENCE_CACHE to keep references between sessions.
    """
    env = os.environ.get("CDAIPY_REFERENCE_CACHE")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("references")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {line}")
