import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mtunet.backbone import BackboneConfig  # noqa: E402

torch.set_num_threads(1)

TINY = BackboneConfig(depth=1, base_width=4)
SMALL = BackboneConfig(depth=2, base_width=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
