from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pytest
from wireframe3d.core import ResultCache
from wireframe3d.skeleton import BaseShapeSet, parse_base_shapes, resolve_model

if TYPE_CHECKING:
    from unittest.mock import MagicMock

TEST_DATA = Path(__file__).parent / "cli_test_data"


@pytest.fixture(scope="session")
def toy_model_path() -> Path:
    """A flat square with a tip: every keypoint has ``z = 0``."""
    return TEST_DATA / "toy_flat.json"


@pytest.fixture(autouse=True)
def isolated_cache_dir(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.chdir(tmp_path)


@pytest.fixture()
def mock_cache_persist(mocker) -> MagicMock:
    return mocker.patch("wireframe3d.core.ResultCache.persist")


@pytest.fixture()
def cache(tmp_path: Path) -> ResultCache:
    cache = ResultCache(tmp_path / "cache")
    yield cache
    cache.clear_all()


@pytest.fixture(scope="session")
def chair() -> BaseShapeSet:
    return resolve_model("chair")


@pytest.fixture(scope="session")
def car() -> BaseShapeSet:
    return resolve_model("car")


@pytest.fixture(scope="session")
def toy_flat(toy_model_path: Path) -> BaseShapeSet:
    return parse_base_shapes(json.loads(toy_model_path.read_text()))


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
