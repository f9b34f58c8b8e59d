from dataclasses import dataclass, field

import numpy as np

from cramkit.errors import ContractError, DeterminismError
from cramkit.tensor import Tape

__all__ = ['GradCheckReport', 'grad_check']


@dataclass
class GradCheckReport:
    """
    Outcome of a finite-difference comparison.

    Attributes:
        max_rel_error (dict): parameter name -> max relative error over the
            checked coordinates (kinks excluded)
        flagged (list): ``(name, flat_index)`` coordinates sitting on a
            non-differentiable point, excluded from pass/fail
        unresolved (list): ``(name, flat_index)`` coordinates whose gradient
            is too small for the difference quotient to resolve at the
            report tolerance and whose discrepancy is within round-off;
            excluded from pass/fail
        checked (int): Number of coordinates compared
    """

    max_rel_error: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)
    unresolved: list = field(default_factory=list)
    checked: int = 0
    tolerance: float = 1e-5

    @property
    def worst(self):
        if not self.max_rel_error:
            return None, 0.0
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def passed(self, tolerance=None):
        limit = self.tolerance if tolerance is None else tolerance
        return self.worst[1] <= limit

    def to_dict(self):
        name, error = self.worst
        return {
            'max_rel_error': dict(self.max_rel_error),
            'flagged': [[n, int(i)] for n, i in self.flagged],
            'unresolved': [[n, int(i)] for n, i in self.unresolved],
            'checked': self.checked,
            'worst_parameter': name,
            'worst_error': error,
        }


def _evaluate(f, params):
    return f(params.leaves()).item()


def grad_check(f, params, epsilon=1e-5, tolerance=1e-5, max_coords=None, rng=None, kink_tolerance=1e-3,
               floor=1e-8, roundoff_factor=64.0):
    """
    Compares autodiff gradients with central finite differences.

    A coordinate whose one-sided differences disagree by more than
    ``kink_tolerance`` (relative to ``max(1, |central|)``) sits on a kink
    and is flagged instead of scored. The difference quotient carries a
    round-off error of about ``roundoff_factor * eps * max(1, |f|) / epsilon``;
    a coordinate whose discrepancy stays inside that noise while its
    gradient is too small for the noise to be below ``tolerance`` is listed
    as unresolved instead of scored. Any larger discrepancy is scored.

    Args:
        f (callable): ``f(ParamSet) -> scalar Tensor``, built from tensor
            primitives and deterministic for fixed parameters
        params (ParamSet): Point of evaluation
        epsilon (float): Finite-difference step
        tolerance (float): Pass threshold, kept on the report for callers
        max_coords (int, optional): Check at most this many coordinates per
            parameter, chosen with ``rng``
        rng (numpy.random.Generator, optional): Coordinate sampler
        kink_tolerance (float): One-sided disagreement marking a kink
        floor (float): Smallest denominator of the relative error
        roundoff_factor (float): Multiple of machine epsilon bounding the
            evaluation error of ``f``

    Returns:
        GradCheckReport: Per-parameter maximum relative error
    """
    if epsilon <= 0:
        raise ContractError('epsilon must be positive, got {}'.format(epsilon))
    base = params.leaves()
    with Tape() as tape:
        loss = f(base)
    tape.backward(loss)
    f0 = loss.item()
    if _evaluate(f, params) != f0:
        raise DeterminismError('objective returned different values for identical parameters')
    analytic = base.grads().arrays()
    noise = roundoff_factor * np.finfo(np.float64).eps * max(1.0, abs(f0)) / epsilon
    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(tolerance=tolerance)
    for entry in params:
        values = entry.tensor.data.reshape(-1)
        coords = np.arange(values.size)
        if max_coords is not None and values.size > max_coords:
            coords = np.sort(rng.choice(values.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            plus = values.copy()
            plus[i] += epsilon
            minus = values.copy()
            minus[i] -= epsilon
            shape = entry.tensor.shape
            f_plus = _evaluate(f, params.with_values({entry.name: plus.reshape(shape)}))
            f_minus = _evaluate(f, params.with_values({entry.name: minus.reshape(shape)}))
            central = (f_plus - f_minus) / (2.0 * epsilon)
            forward = (f_plus - f0) / epsilon
            backward = (f0 - f_minus) / epsilon
            if abs(forward - backward) > kink_tolerance * max(1.0, abs(central)):
                report.flagged.append((entry.name, int(i)))
                continue
            a = float(analytic[entry.name].reshape(-1)[i])
            diff = abs(a - central)
            if tolerance > 0 and diff <= noise and max(abs(a), abs(central)) * tolerance < noise:
                report.unresolved.append((entry.name, int(i)))
                continue
            rel = diff / max(abs(a), abs(central), floor)
            worst = max(worst, rel)
            report.checked += 1
        report.max_rel_error[entry.name] = worst
    return report
