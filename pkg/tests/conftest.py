import numpy as np
import pytest

from cramkit import logger
from cramkit.data import make_synthetic
from cramkit.model import ModelConfig
from cramkit.objective import FunctionObjective
from cramkit.params import ParamSet
from cramkit.tensor import mul, scale, tsum


@pytest.fixture(autouse=True)
def clean_event_log(monkeypatch):
    monkeypatch.delenv('CRAM_LOG_FILE', raising=False)
    logger.clear_logs()
    yield
    logger.clear_logs()


def vector(*values, name='w'):
    return ParamSet.from_arrays({name: np.array(values, dtype=np.float64)})


def half_square():
    """
    ``L(w) = 0.5 * |w|^2`` over every entry of the set.
    """
    def fn(params):
        total = None
        for entry in params:
            term = tsum(mul(entry.tensor, entry.tensor))
            total = term if total is None else total + term
        return scale(total, 0.5)
    return FunctionObjective(fn)


@pytest.fixture
def quadratic():
    return half_square()


@pytest.fixture
def blobs():
    return make_synthetic('gaussian_mixture', n=200, num_classes=4, noise=0.3, seed=0, calibration_size=40)


@pytest.fixture
def small_config():
    return ModelConfig([2, 8, 8, 4])
