"""
Gradient oracles consumed by the optimizers.

An objective turns a :class:`~cramkit.params.ParamSet` into ``(loss, grads)``
with one forward and one backward pass, and counts the passes it ran.
"""
from cramkit.tensor import Tape

__all__ = ['Objective', 'FunctionObjective']


class Objective:
    """
    Base class of gradient oracles.
    """

    def __init__(self):
        self.passes = 0

    def value_and_grad(self, params, track_stats=True):
        """
        Args:
            params (ParamSet): Point of evaluation
            track_stats (bool): Whether normalization statistics may be
                updated by this pass (dense passes only)

        Returns:
            tuple: ``(loss as float, gradients as ParamSet)``
        """
        leaves = params.leaves()
        with Tape() as tape:
            loss = self._loss(leaves, track_stats)
        tape.backward(loss)
        self.passes += 1
        return loss.item(), leaves.grads()

    def __call__(self, params):
        """
        Loss tensor at ``params`` with statistics frozen, usable as the
        ``f`` of :func:`~cramkit.gradcheck.grad_check`.
        """
        return self._loss(params, False)

    def value(self, params):
        with Tape(frozen=True):
            return self._loss(params.leaves(), False).item()

    def snapshot(self):
        """
        State a pass may mutate besides its result; handed back to
        :meth:`restore` when a step is abandoned.
        """
        return None

    def restore(self, saved):
        pass

    def _loss(self, params, track_stats):
        raise NotImplementedError


class FunctionObjective(Objective):
    """
    Wraps a scalar function written with tensor primitives, e.g.
    ``lambda p: 0.5 * tsum(mul(p['w'], p['w']))``.
    """

    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def _loss(self, params, track_stats):
        return self.fn(params)
