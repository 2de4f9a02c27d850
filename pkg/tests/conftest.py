import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_default_dtype():
    # Tests that want float64 models construct them explicitly; keep the
    # global default stable so test order cannot leak state.
    prev = torch.get_default_dtype()
    yield
    torch.set_default_dtype(prev)
