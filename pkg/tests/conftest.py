import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tpl():
    from duplexfit.template import default_quadruped

    return default_quadruped(0.04)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
