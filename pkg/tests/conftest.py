from __future__ import annotations

import sys
from pathlib import Path

import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from wenets import tensor_nn as nn  # noqa: E402
from wenets.settings import SEED_ENV_VAR  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_run(monkeypatch):
    """Seeds come from flags or config only, and kernels start deterministic."""
    monkeypatch.setenv(SEED_ENV_VAR, "")
    with nn.execution(deterministic=True, workers=1, check_finite=False):
        yield
