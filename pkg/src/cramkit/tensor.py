"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive goes through :func:`forward_primitive`, which checks shapes,
refuses non-finite values and records a node on the active :class:`Tape`.
:meth:`Tape.backward` walks the recorded nodes once, in reverse order, and
fills the ``grad`` slot of every leaf tensor that asked for one.

The tape is rebuilt for every forward pass::

    with Tape() as tape:
        loss = model_loss(params)
    tape.backward(loss)
"""
import threading

import numpy as np

from cramkit.errors import ContractError, NumericDomainError, ShapeError

__all__ = [
    'PRIMITIVES',
    'Tensor',
    'Tape',
    'active_tape',
    'forward_primitive',
    'backward',
    'matmul',
    'add',
    'sub',
    'mul',
    'div',
    'scale',
    'relu',
    'sqrt',
    'tsum',
    'mean',
    'variance',
    'log_softmax',
    'gather',
]

PRIMITIVES = (
    'matmul', 'add', 'mul', 'relu', 'sub', 'scale', 'sum', 'mean',
    'variance', 'sqrt', 'div', 'log_softmax', 'gather',
)

_state = threading.local()


class Tensor:
    """
    Immutable dense array of 64-bit reals with an optional gradient slot.

    Args:
        data (array-like): Values, copied on construction
        requires_grad (bool): Whether backward should populate ``grad``
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        values = np.array(data, dtype=np.float64)
        if any(dim <= 0 for dim in values.shape):
            raise ShapeError('tensor dimensions must be positive, got {}'.format(values.shape))
        if not np.all(np.isfinite(values)):
            raise NumericDomainError('tensor contains NaN or Inf')
        values.setflags(write=False)
        self.data = values
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    @classmethod
    def _wrap(cls, values):
        tensor = cls.__new__(cls)
        values.setflags(write=False)
        tensor.data = values
        tensor.grad = None
        tensor.requires_grad = False
        tensor._node = None
        return tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return np.array(self.data)

    def item(self):
        if self.data.size != 1:
            raise ShapeError('item() needs a single-element tensor, got shape {}'.format(self.shape))
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(np.array(self.data))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return 'Tensor(shape={}, requires_grad={})'.format(self.shape, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ('op', 'inputs', 'output', 'backward_rule', 'tape')

    def __init__(self, op, inputs, output, backward_rule, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule
        self.tape = tape


class Tape:
    """
    Ordered record of the primitives executed while the tape is active.

    Args:
        frozen (bool): A frozen tape records nothing; forward passes run
            under it produce tensors without history.
    """

    def __init__(self, frozen=False):
        self.nodes = []
        self.frozen = frozen

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        stack.pop()
        return False

    def record(self, node):
        self.nodes.append(node)

    def backward(self, loss):
        backward(self, loss)


def _tape_stack():
    stack = getattr(_state, 'stack', None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape():
    """
    Returns:
        Tape: Innermost active tape of the calling thread, or None
    """
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError('{}: shapes {} and {} do not broadcast'.format(op, a.shape, b.shape))


def _expand_reduced(grad, shape, axis):
    if axis is None:
        return np.broadcast_to(grad, shape)
    return np.broadcast_to(np.expand_dims(grad, axis), shape)


def _fw_matmul(inputs, attrs):
    a, b = inputs
    transpose_b = attrs.get('transpose_b', False)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError('matmul: operands must be 2-d, got {} and {}'.format(a.shape, b.shape))
    rhs = b.data.T if transpose_b else b.data
    if a.shape[1] != rhs.shape[0]:
        raise ShapeError('matmul: inner dimensions differ, {} and {}{}'.format(
            a.shape, b.shape, ' (transposed)' if transpose_b else ''))
    out = a.data @ rhs

    def rule(g):
        ga = g @ rhs.T
        gb = a.data.T @ g
        return [ga, gb.T if transpose_b else gb]
    return out, rule


def _fw_add(inputs, attrs):
    a, b = inputs
    _broadcast_check('add', a, b)

    def rule(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]
    return a.data + b.data, rule


def _fw_sub(inputs, attrs):
    a, b = inputs
    _broadcast_check('sub', a, b)

    def rule(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]
    return a.data - b.data, rule


def _fw_mul(inputs, attrs):
    a, b = inputs
    _broadcast_check('mul', a, b)

    def rule(g):
        return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]
    return a.data * b.data, rule


def _fw_div(inputs, attrs):
    a, b = inputs
    _broadcast_check('div', a, b)
    if np.any(b.data == 0.0):
        raise NumericDomainError('div: divisor contains zeros')
    out = a.data / b.data

    def rule(g):
        return [_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)]
    return out, rule


def _fw_scale(inputs, attrs):
    (x,) = inputs
    factor = float(attrs['factor'])

    def rule(g):
        return [g * factor]
    return x.data * factor, rule


def _fw_relu(inputs, attrs):
    (x,) = inputs
    # subgradient 0 at exactly 0
    active = x.data > 0.0

    def rule(g):
        return [np.where(active, g, 0.0)]
    return np.where(active, x.data, 0.0), rule


def _fw_sqrt(inputs, attrs):
    (x,) = inputs
    if np.any(x.data < 0.0):
        raise NumericDomainError('sqrt: negative input')
    out = np.sqrt(x.data)

    def rule(g):
        return [g * 0.5 / out]
    return out, rule


def _fw_sum(inputs, attrs):
    (x,) = inputs
    axis = attrs.get('axis')

    def rule(g):
        return [np.array(_expand_reduced(g, x.shape, axis))]
    return np.asarray(x.data.sum(axis=axis)), rule


def _fw_mean(inputs, attrs):
    (x,) = inputs
    axis = attrs.get('axis')
    count = x.size if axis is None else x.shape[axis]

    def rule(g):
        return [np.array(_expand_reduced(g, x.shape, axis)) / count]
    return np.asarray(x.data.mean(axis=axis)), rule


def _fw_variance(inputs, attrs):
    (x,) = inputs
    axis = attrs.get('axis')
    count = x.size if axis is None else x.shape[axis]
    centered = x.data - x.data.mean(axis=axis, keepdims=axis is not None)

    def rule(g):
        return [np.array(_expand_reduced(g, x.shape, axis)) * 2.0 * centered / count]
    return np.asarray((centered ** 2).mean(axis=axis)), rule


def _fw_log_softmax(inputs, attrs):
    (x,) = inputs
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def rule(g):
        return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]
    return out, rule


def _fw_gather(inputs, attrs):
    (x,) = inputs
    indices = np.asarray(attrs['indices'], dtype=np.int64)
    if x.data.ndim != 2 or indices.shape != (x.shape[0],):
        raise ShapeError('gather: need a 2-d input and one index per row, got {} and {}'.format(
            x.shape, indices.shape))
    if np.any(indices < 0) or np.any(indices >= x.shape[1]):
        raise ShapeError('gather: index out of range for shape {}'.format(x.shape))
    rows = np.arange(x.shape[0])

    def rule(g):
        gx = np.zeros(x.shape)
        gx[rows, indices] = g
        return [gx]
    return x.data[rows, indices], rule


_FORWARD = {
    'matmul': _fw_matmul,
    'add': _fw_add,
    'sub': _fw_sub,
    'mul': _fw_mul,
    'div': _fw_div,
    'scale': _fw_scale,
    'relu': _fw_relu,
    'sqrt': _fw_sqrt,
    'sum': _fw_sum,
    'mean': _fw_mean,
    'variance': _fw_variance,
    'log_softmax': _fw_log_softmax,
    'gather': _fw_gather,
}

_ARITY = {'matmul': 2, 'add': 2, 'sub': 2, 'mul': 2, 'div': 2}


def forward_primitive(op, inputs, **attrs):
    """
    Evaluates one primitive and records it on the active tape.

    Args:
        op (str): One of :data:`PRIMITIVES`
        inputs (list): Operand tensors (plain numbers are wrapped)
        **attrs: Primitive attributes (``axis``, ``factor``, ``indices``,
            ``transpose_b``)

    Returns:
        Tensor: The result; it carries history when a recording tape is
        active and an operand requires a gradient.
    """
    if op not in _FORWARD:
        raise ContractError('unknown primitive {!r}'.format(op))
    inputs = [_as_tensor(x) for x in inputs]
    if len(inputs) != _ARITY.get(op, 1):
        raise ContractError('{} takes {} operand(s), got {}'.format(op, _ARITY.get(op, 1), len(inputs)))
    for x in inputs:
        if not np.all(np.isfinite(x.data)):
            raise NumericDomainError('{}: non-finite input of shape {}'.format(op, x.shape))
    with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
        values, rule = _FORWARD[op](inputs, attrs)
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericDomainError('{}: result is not finite'.format(op))
    out = Tensor._wrap(values)
    tape = active_tape()
    if tape is not None and not tape.frozen and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        node = _Node(op, inputs, out, rule, tape)
        out._node = node
        tape.record(node)
    return out


def backward(tape, loss):
    """
    Fills ``grad`` of every leaf reachable from ``loss`` through ``tape``.

    Gradients add up across fan-out and onto any gradient already present in
    a leaf's slot. Tensors without ``requires_grad`` are left untouched.

    Args:
        tape (Tape): Tape holding the history of ``loss``
        loss (Tensor): Scalar (shape ``()``) result
    """
    if loss.shape != ():
        raise ContractError('backward needs a scalar loss, got shape {}'.format(loss.shape))
    if loss._node is not None and loss._node.tape is not tape:
        raise ContractError('loss was not recorded on this tape')
    grads = {id(loss): np.ones(())}
    leaves = {}
    if loss.requires_grad and loss.is_leaf:
        leaves[id(loss)] = loss
    with np.errstate(over='ignore', invalid='ignore'):
        for node in reversed(tape.nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            for x, gx in zip(node.inputs, node.backward_rule(gout)):
                if not x.requires_grad:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
                if x.is_leaf:
                    leaves[key] = x
    for key, leaf in leaves.items():
        g = np.array(np.broadcast_to(grads[key], leaf.shape), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericDomainError('gradient is not finite for a tensor of shape {}'.format(leaf.shape))
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def matmul(a, b, transpose_b=False):
    return forward_primitive('matmul', [a, b], transpose_b=transpose_b)


def add(a, b):
    return forward_primitive('add', [a, b])


def sub(a, b):
    return forward_primitive('sub', [a, b])


def mul(a, b):
    return forward_primitive('mul', [a, b])


def div(a, b):
    return forward_primitive('div', [a, b])


def scale(x, factor):
    return forward_primitive('scale', [x], factor=factor)


def relu(x):
    return forward_primitive('relu', [x])


def sqrt(x):
    return forward_primitive('sqrt', [x])


def tsum(x, axis=None):
    return forward_primitive('sum', [x], axis=axis)


def mean(x, axis=None):
    return forward_primitive('mean', [x], axis=axis)


def variance(x, axis=None):
    return forward_primitive('variance', [x], axis=axis)


def log_softmax(x):
    return forward_primitive('log_softmax', [x])


def gather(x, indices):
    return forward_primitive('gather', [x], indices=indices)
