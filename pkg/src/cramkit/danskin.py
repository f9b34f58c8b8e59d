"""
Brute-force check that the compressed-perturbation gradient is a descent
direction for the worst-case compressed loss.

For an analytic objective ``L`` on a few dimensions, the worst-case loss
``G(w) = max over |delta| <= rho of L(C(w + delta))`` is evaluated on a grid
of perturbations. With ``delta*`` the grid maximizer and ``M`` the mask of
``w + delta*``, the direction ``-M * grad L(C(w + delta*))`` must decrease
``G`` for a small enough step, unless ``w`` is an articulation point (the
mask is not locally constant around the maximizer, or another grid point
close to the maximum would rise along the direction).
"""
from dataclasses import dataclass, field

import numpy as np

from cramkit import logger
from cramkit.compression import compress_rows
from cramkit.errors import ContractError

__all__ = [
    'AnalyticObjective',
    'PointResult',
    'DanskinReport',
    'analytic_zoo',
    'perturbation_grid',
    'danskin_descent_check',
]

COARSE_GRID = 5
MAX_DIM = 4


@dataclass
class AnalyticObjective:
    """
    Smooth objective evaluated row-wise.

    Attributes:
        name (str): Display name
        value (callable): ``(P, d) array -> (P,) array``
        grad (callable): ``(P, d) array -> (P, d) array``
    """

    name: str
    value: object
    grad: object


def _logsumexp(x):
    peak = x.max(axis=1, keepdims=True)
    return (peak + np.log(np.exp(x - peak).sum(axis=1, keepdims=True)))[:, 0]


def analytic_zoo(dim, seed=0):
    """
    Objectives used by the descent check.

    Returns:
        list: AnalyticObjective items for dimension ``dim``
    """
    rng = np.random.default_rng(seed)
    shift = rng.normal(size=dim)
    weights = np.linspace(0.5, 3.0, dim)

    def softmax(X):
        e = np.exp(X - X.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return [
        AnalyticObjective('quadratic', lambda X: 0.5 * np.sum(X * X, axis=1), lambda X: np.array(X, dtype=float)),
        AnalyticObjective('shifted_quadratic', lambda X: 0.5 * np.sum((X - shift) ** 2, axis=1), lambda X: X - shift),
        AnalyticObjective('anisotropic_quadratic', lambda X: 0.5 * np.sum(weights * X * X, axis=1),
                          lambda X: weights * X),
        AnalyticObjective('log_sum_exp', _logsumexp, softmax),
    ]


def perturbation_grid(dim, rho, resolution):
    """
    Points of a ``resolution``-per-axis lattice on ``[-rho, rho]^dim`` inside
    the ball of radius ``rho``, the origin always included.

    Returns:
        numpy.ndarray: ``(G, dim)`` perturbations
    """
    if rho == 0.0 or resolution < 2:
        return np.zeros((1, dim))
    axis = np.linspace(-rho, rho, resolution)
    grid = np.stack(np.meshgrid(*([axis] * dim), indexing='ij'), axis=-1).reshape(-1, dim)
    grid = grid[np.sum(grid * grid, axis=1) <= rho * rho * (1.0 + 1e-12)]
    if not np.any(np.all(grid == 0.0, axis=1)):
        grid = np.vstack([np.zeros((1, dim)), grid])
    return grid


@dataclass
class PointResult:
    objective: str
    point: list
    status: str
    cram_value: float
    change: float = 0.0
    reason: str = ''


@dataclass
class DanskinReport:
    results: list = field(default_factory=list)
    coarse: bool = False

    @property
    def violations(self):
        return [r for r in self.results if r.status == 'violation']

    @property
    def articulation_points(self):
        return [r for r in self.results if r.status == 'articulation']

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        return {
            'passed': self.passed,
            'coarse': self.coarse,
            'results': [r.__dict__ for r in self.results],
        }


def _worst_case(objective, spec, w, grid):
    compressed, masks = compress_rows(w + grid, spec)
    values = objective.value(compressed)
    return values, compressed, masks


def danskin_descent_check(objective, spec, rho, grid_resolution, points, move=1e-7, tie_tolerance=1e-9):
    """
    Runs the descent check at each point.

    Args:
        objective (AnalyticObjective): Smooth objective of dimension <= 4
        spec (CompressionSpec): Mask-inducing operator
        rho (float): Perturbation radius
        grid_resolution (int): Lattice points per axis
        points (array): ``(P, d)`` points to test
        move (float): Step length along the direction, relative to
            ``max(1, |w|)``
        tie_tolerance (float): Relative gap under which two grid values tie

    Returns:
        DanskinReport: One result per point with status ``pass``,
        ``violation``, ``articulation`` or ``stationary``
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dim = points.shape[1]
    if dim > MAX_DIM:
        raise ContractError('descent check supports at most {} dimensions, got {}'.format(MAX_DIM, dim))
    if not spec.is_mask_kind:
        raise ContractError('descent check needs a mask-inducing operator, got {}'.format(spec.kind))
    report = DanskinReport(coarse=0 < rho and grid_resolution < COARSE_GRID)
    if report.coarse:
        logger.log_event('warning', {
            'check': 'danskin',
            'message': 'grid resolution {} gives a coarse maximizer'.format(grid_resolution),
        })
    grid = perturbation_grid(dim, rho, grid_resolution)
    spacing = 2.0 * rho / (grid_resolution - 1) if rho > 0 and grid_resolution > 1 else 0.0
    for w in points:
        values, compressed, masks = _worst_case(objective, spec, w, grid)
        best = int(np.argmax(values))
        top = float(values[best])
        result = PointResult(objective.name, [float(x) for x in w], 'pass', top)
        mask = masks[best]
        near = np.max(np.abs(grid - grid[best]), axis=1) <= spacing * (1.0 + 1e-9)
        if np.any(masks[near] != mask):
            result.status = 'articulation'
            result.reason = 'mask not locally constant at the maximizer'
            report.results.append(result)
            continue
        gradients = np.where(masks, objective.grad(compressed), 0.0)
        direction = -gradients[best]
        norm = float(np.linalg.norm(direction))
        if norm == 0.0:
            result.status = 'stationary'
            result.reason = 'zero projected gradient'
            report.results.append(result)
            continue
        step = move * max(1.0, float(np.linalg.norm(w))) / norm
        # grid values close enough to overtake the maximizer within one step
        reach = 2.0 * step * norm * float(np.max(np.linalg.norm(gradients, axis=1)))
        competing = values >= top - max(reach, tie_tolerance * max(1.0, abs(top)))
        if np.any(masks[competing] != mask) or np.any(gradients[competing] @ direction >= 0.0):
            result.status = 'articulation'
            result.reason = 'competing maximizers'
            report.results.append(result)
            continue
        moved, _, _ = _worst_case(objective, spec, w + step * direction, grid)
        result.change = float(moved.max()) - top
        if not result.change < 0.0:
            result.status = 'violation'
            result.reason = 'worst-case loss did not decrease'
        report.results.append(result)
    return report
