import pytest
import torch

from pausenlu import numcore as nc


@pytest.fixture(autouse=True)
def float64_single_thread():
    prev = torch.get_default_dtype()
    nc.configure(seed=0, dtype=torch.float64)
    yield
    torch.set_default_dtype(prev)
