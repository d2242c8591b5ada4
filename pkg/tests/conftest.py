import pytest

from rstbench.cli import _bundled_profile_path
from rstbench.clock import CalibrationProfile
from rstbench.harness import get_corpus


@pytest.fixture(scope="session")
def profile():
    return CalibrationProfile.load(_bundled_profile_path())


@pytest.fixture(scope="session")
def corpus():
    return get_corpus()
