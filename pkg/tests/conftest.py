import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest

CACHE_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), ".cache")


@pytest.fixture(scope="session")
def default_lab():
    """World, base pool and pre-trained encoder at the default configuration (disk-cached)."""
    from lastshot.harness.config import RunConfig
    from lastshot.harness.train import prepare_lab

    return prepare_lab(RunConfig.defaults(), cache_dir=CACHE_DIR)
