import numpy as np
import pytest

from stembuck import experiments as ex
from stembuck.models import ModelKind
from stembuck.stems import Species


@pytest.fixture(scope="session")
def small_data():
    return ex.prepare_species(Species.PiceaMariana, 40, seed=3)


@pytest.fixture(scope="session")
def small_models(small_data):
    """Quickly trained models; good enough for interface checks, not accuracy."""
    return ex.TrainedModels.fit(small_data, seed=3, epochs=30)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def stochastic_model(small_models):
    return small_models.models[ModelKind.STOCHASTIC]


@pytest.fixture(scope="session")
def deterministic_model(small_models):
    return small_models.models[ModelKind.DETERMINISTIC]


FULL_SCALE_SEED = 7
FULL_SCALE_STEMS = 500


class FullScale:
    """Every species at desk scale: 500 stems each, 200 training epochs,
    plus the baseline, minimum-diameter and price studies on the test split."""

    def __init__(self, seed=FULL_SCALE_SEED, n_stems=FULL_SCALE_STEMS, epochs=200):
        import time
        t0 = time.perf_counter()
        self.seed = seed
        self.trained = []
        for sp in Species:
            data = ex.prepare_species(sp, n_stems, seed)
            self.trained.append(ex.TrainedModels.fit(data, seed, epochs=epochs))
        self.baseline = ex.run_baseline_study(self.trained, seed)
        self.min_diameter = ex.run_min_diameter_study(self.trained, seed)
        self.price = ex.run_price_study(self.trained, seed)
        self.seconds = time.perf_counter() - t0

    @property
    def reports(self):
        return self.baseline + self.min_diameter + self.price


@pytest.fixture(scope="session")
def full_scale():
    return FullScale()


ACCEPTANCE_LINES: dict = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
