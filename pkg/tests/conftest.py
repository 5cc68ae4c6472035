import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Quick-schedule toy corpus shared by the CLI tests (read-only use)."""
    from hprosody.toy import write_toy_corpus
    root = tmp_path_factory.mktemp("toy")
    write_toy_corpus(root, n_utterances=20, n_test=5, quick=True)
    return root
