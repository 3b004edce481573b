from __future__ import annotations

from pathlib import Path

import pytest

from urbankg.config import load_config
from urbankg.graph_store import GraphStore
from urbankg.warehouse import Warehouse

REPO_ROOT = Path(__file__).resolve().parent.parent
LA_FIXTURES = REPO_ROOT / "fixtures" / "la2025"


@pytest.fixture
def warehouse(tmp_path) -> Warehouse:
    return Warehouse(tmp_path / "wh")


@pytest.fixture
def store() -> GraphStore:
    return GraphStore()


@pytest.fixture
def la_config(tmp_path):
    """The checked-in LA scenario with state redirected to a temp dir."""
    cfg = load_config(LA_FIXTURES / "config.yaml")
    cfg.warehouse_root = str(tmp_path / "state")
    return cfg
