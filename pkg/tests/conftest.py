import numpy as np
import pytest

from imt.imgstack import ComplexImageStack


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture
def small_stack(rng):
    data = (rng.normal(size=(3, 16, 16)) + 1j * rng.normal(size=(3, 16, 16))).astype(
        np.complex64
    )
    return ComplexImageStack(data)
