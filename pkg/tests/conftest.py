import pytest

from glauber.rng import substream


@pytest.fixture
def rng():
    return substream(20260810)
