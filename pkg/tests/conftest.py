"""Shared fixtures and hypothesis settings for the test suite."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from helpers import tiny_feature_config, tiny_model, tiny_run_config  # noqa: E402

settings.register_profile("suite", deadline=None, max_examples=25)
settings.load_profile("suite")

ARTIFACTS = Path(__file__).resolve().parent.parent / "artifacts"


@pytest.fixture(scope="session")
def model():
    return tiny_model(seed=0)


@pytest.fixture(scope="session")
def feat_cfg():
    return tiny_feature_config()


@pytest.fixture(scope="session")
def run_cfg():
    return tiny_run_config()


@pytest.fixture(scope="session")
def artifacts_dir():
    return ARTIFACTS


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
