import numpy as np
import pytest

from cramkit.errors import ContractError, ShapeError
from cramkit.params import ParamEntry, ParamSet
from cramkit.tensor import Tensor


def make_set():
    return ParamSet.from_arrays(
        {'w': np.arange(6.0).reshape(2, 3), 'b': np.array([0.5, -0.5])},
        tags={'b': ['bias']},
    )


def test_default_prunability_follows_tags():
    params = make_set()
    assert params.prunable_names() == ['w']
    assert params.num_prunable == 6
    assert params.size == 8


def test_bias_cannot_be_prunable():
    with pytest.raises(ContractError):
        ParamSet([ParamEntry('b', Tensor([1.0]), True, frozenset(['bias']))])


def test_duplicate_names_rejected():
    entry = ParamEntry('w', Tensor([1.0]), True, frozenset(['weight']))
    with pytest.raises(ContractError):
        ParamSet([entry, entry])


def test_unknown_tag_rejected():
    with pytest.raises(ContractError):
        ParamSet([ParamEntry('w', Tensor([1.0]), True, frozenset(['gamma']))])


def test_flatten_unflatten_round_trip():
    params = make_set()
    flat = params.flatten()
    np.testing.assert_array_equal(flat, [0, 1, 2, 3, 4, 5, 0.5, -0.5])
    assert params.unflatten(flat).equal(params)


def test_unflatten_checks_length():
    with pytest.raises(ShapeError):
        make_set().unflatten(np.zeros(3))


def test_with_values_checks_shape_and_keeps_flags():
    params = make_set()
    updated = params.with_values({'w': np.ones((2, 3))})
    assert updated.entry('b').tags == frozenset(['bias'])
    np.testing.assert_array_equal(updated['b'].data, [0.5, -0.5])
    with pytest.raises(ShapeError):
        params.with_values({'w': np.ones(6)})


def test_arithmetic_returns_new_sets():
    params = make_set()
    doubled = params.add(params)
    np.testing.assert_array_equal(doubled['w'].data, 2 * params['w'].data)
    np.testing.assert_array_equal(params.add(params, -1.0)['w'].data, np.zeros((2, 3)))
    assert params.scale(0.0).norm() == 0.0
    assert doubled['w'] is not params['w']


def test_grads_are_zero_when_slot_empty():
    grads = make_set().grads()
    assert grads.norm() == 0.0


def test_equal_is_bitwise():
    params = make_set()
    assert params.equal(params.leaves())
    nudged = params.with_values({'b': np.array([0.5, np.nextafter(-0.5, 0.0)])})
    assert not params.equal(nudged)
