import os

import numpy as np
import pytest
import torch

torch.set_num_threads(int(os.environ.get("SENDAI_THREADS", "1")))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
