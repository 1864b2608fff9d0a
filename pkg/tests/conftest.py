import pytest

from memsg.sgcore import default_vocabulary
from memsg.synthdata import default_scenario, generate_recording


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def scenario():
    return default_scenario()


@pytest.fixture(scope="session")
def small_recording(vocab, scenario):
    return generate_recording(scenario, vocab, seed=3)
