import numpy as np
import pytest

from racebench.ggv import preset
from racebench.raceline import generate_raceline
from racebench.tracks import track_a, track_b


@pytest.fixture(scope="session")
def cautious():
    return preset("cautious")


@pytest.fixture(scope="session")
def trackA():
    return track_a()


@pytest.fixture(scope="session")
def trackB():
    return track_b()


@pytest.fixture(scope="session")
def racelineA(trackA, cautious):
    return generate_raceline(trackA, cautious)


@pytest.fixture(scope="session")
def racelineB(trackB, cautious):
    return generate_raceline(trackB, cautious)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
