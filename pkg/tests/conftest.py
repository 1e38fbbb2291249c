import warnings

import numpy as np
import pytest

from plmcmc.demo import train_demo_model


@pytest.fixture(scope="session")
def demo():
    """Shallow 2-dim flow fit to the banana data (about a second to train)."""
    return train_demo_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_kernel_warning():
    # several fixtures use sigma_p close to sigma_r on purpose
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="tag-based kernel ratio")
        yield
