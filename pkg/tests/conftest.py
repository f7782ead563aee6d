from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixture_data import write_evalhome  # noqa: E402

from renokit.evalharness import load_dataset  # noqa: E402


@pytest.fixture(scope="session")
def evalhome_path(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("evalhome") / "evalhome_fixture.jsonl"
    return write_evalhome(path)


@pytest.fixture(scope="session")
def evalhome(evalhome_path):
    return load_dataset(evalhome_path)
