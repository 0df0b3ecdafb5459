from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import settings

from support import GitRepo

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path_factory):
    # Keep the user's global Git config and theta env vars out of every test.
    home = tmp_path_factory.mktemp("home")
    monkeypatch.setenv("HOME", str(home))
    monkeypatch.setenv("GIT_CONFIG_NOSYSTEM", "1")
    monkeypatch.setenv("GIT_TERMINAL_PROMPT", "0")
    for var in ("THETA_CHECKPOINT_TYPE", "THETA_UPDATE_TYPE", "THETA_UPDATE_DATA",
                "GIT_DIR", "GIT_WORK_TREE", "GIT_INDEX_FILE"):
        monkeypatch.delenv(var, raising=False)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def git_repo(tmp_path):
    repo = GitRepo(tmp_path / "work")
    repo.track()
    return repo


@pytest.fixture
def cwd(tmp_path):
    old = os.getcwd()
    os.chdir(tmp_path)
    yield tmp_path
    os.chdir(old)


# -- acceptance reporting ------------------------------------------------------------

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    class Criterion:
        def __init__(self, number: int, title: str) -> None:
            self.number, self.title, self.notes = number, title, []

        def note(self, text: str) -> None:
            self.notes.append(text)

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            verdict = "PASS" if exc_type is None else "FAIL"
            detail = "; ".join(self.notes)
            if exc is not None:
                reason = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
                detail = f"{detail}; {reason}" if detail else reason
            line = f"criterion {self.number} {verdict}: {self.title}" + (f" ({detail})" if detail else "")
            _CRITERIA.append(line)
            print(line)
            return False

    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
