import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import TINY_RAW, table_env  # noqa: E402


@pytest.fixture
def tiny_env():
    return table_env(TINY_RAW)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
