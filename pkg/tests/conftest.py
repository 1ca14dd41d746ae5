import pytest

from uncertnerf.scene import make_dataset
from uncertnerf.train import TrainConfig

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_dataset(0, n_views=6, n_eval=2, height=32, width=48, distractor_level=3)


@pytest.fixture
def tiny_config():
    return TrainConfig(n_source_train=2, n_source_eval=3, n_patches=6, n_samples=8, iterations=3, seed=0,
                       checkpoint_every=0)


@pytest.fixture(scope="session")
def acceptance():
    """Recorder for acceptance outcomes; ``acceptance(n, ok, detail)`` then assert on ``ok``."""

    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
