import numpy as np
import pytest

from cramkit import logger
from cramkit.compression import CompressionSpec
from cramkit.danskin import analytic_zoo, danskin_descent_check, perturbation_grid
from cramkit.errors import ContractError

TOP_1 = CompressionSpec.top_k_global(0.5)


def test_grid_stays_inside_the_ball():
    grid = perturbation_grid(2, 1.0, 3)
    assert grid.shape == (5, 2)
    assert np.all(np.linalg.norm(grid, axis=1) <= 1.0 + 1e-12)
    assert np.any(np.all(grid == 0.0, axis=1))


def test_zero_radius_grid_is_the_origin():
    np.testing.assert_array_equal(perturbation_grid(3, 0.0, 11), np.zeros((1, 3)))


@pytest.mark.parametrize('index', range(4))
def test_descent_holds_on_the_zoo(index):
    objective = analytic_zoo(2, seed=0)[index]
    points = np.random.default_rng(index).normal(scale=2.0, size=(8, 2))
    report = danskin_descent_check(objective, TOP_1, rho=0.05, grid_resolution=21, points=points)
    assert len(report.results) == 8
    assert report.passed, [r.__dict__ for r in report.violations]


def test_clear_point_is_a_pass():
    objective = analytic_zoo(2)[0]
    report = danskin_descent_check(objective, TOP_1, rho=0.05, grid_resolution=21, points=[[0.5, 3.0]])
    result = report.results[0]
    assert result.status == 'pass'
    assert result.change < 0.0
    # worst case pushes the kept coordinate outward: 0.5 * (3 + 0.05)^2
    assert result.cram_value == pytest.approx(0.5 * 3.05 ** 2)


def test_tied_point_is_an_articulation():
    objective = analytic_zoo(2)[0]
    report = danskin_descent_check(objective, TOP_1, rho=0.05, grid_resolution=21, points=[[2.0, 2.0]])
    assert report.results[0].status == 'articulation'
    assert report.passed


def test_coarse_grid_warns():
    objective = analytic_zoo(2)[0]
    report = danskin_descent_check(objective, TOP_1, rho=0.05, grid_resolution=3, points=[[0.5, 3.0]])
    assert report.coarse
    assert logger.get_logs('warning')[0]['data']['check'] == 'danskin'


def test_rejects_large_dimension_and_quantizers():
    objective = analytic_zoo(5)[0]
    with pytest.raises(ContractError):
        danskin_descent_check(objective, TOP_1, 0.05, 5, np.ones((1, 5)))
    with pytest.raises(ContractError):
        danskin_descent_check(analytic_zoo(2)[0], CompressionSpec.quantize(4), 0.05, 5, np.ones((1, 2)))


def test_report_serializes():
    report = danskin_descent_check(analytic_zoo(2)[0], TOP_1, 0.05, 11, [[0.5, 3.0], [2.0, 2.0]])
    data = report.to_dict()
    assert data['passed']
    assert [r['status'] for r in data['results']] == ['pass', 'articulation']
