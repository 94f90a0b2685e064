import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from mammomil.phantom import PhantomConfig, generate_dataset  # noqa: E402
from mammomil.runtime import set_deterministic  # noqa: E402

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture(autouse=True)
def _deterministic():
    set_deterministic(True, 0)
    yield


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """40 phantoms in 12 subjects, shared by the CLI and pipeline tests."""
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(PhantomConfig(), 40, 0.25, 12, root, seed=7)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
