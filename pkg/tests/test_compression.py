import itertools

import numpy as np
import pytest

from cramkit.compression import (
    CompressionSpec,
    Mask,
    achieved_sparsity,
    apply_mask,
    check_projective_region,
    compress,
    mask_for,
    n_m_mask,
    parse_spec_list,
    quantize_symmetric,
    sample_operator,
    top_k_mask_global,
    top_k_mask_uniform,
)
from cramkit.errors import ContractError, ShapeError
from cramkit.params import ParamSet

from conftest import vector


def keep(mask, name='w'):
    return mask.arrays[name].astype(int).tolist()


def test_global_top_k_by_magnitude():
    assert keep(top_k_mask_global(vector(0.5, -3.0, 2.0, 0.1), 0.5)) == [0, 1, 1, 0]


def test_ties_go_to_the_lower_index():
    # K = round(1/3 * 3) = 1
    mask = top_k_mask_global(vector(1.0, -1.0, 0.5), 2.0 / 3.0)
    assert keep(mask) == [1, 0, 0]


def test_zero_sparsity_keeps_everything():
    params = vector(0.0, -1.0, 3.0)
    assert keep(top_k_mask_global(params, 0.0)) == [1, 1, 1]
    assert keep(top_k_mask_uniform(params, 0.0)) == [1, 1, 1]


def test_uniform_and_global_differ():
    params = ParamSet.from_arrays({'a': np.array([3.0, 1.0]), 'b': np.array([0.2, 0.1])})
    uniform = top_k_mask_uniform(params, 0.5)
    assert keep(uniform, 'a') == [1, 0] and keep(uniform, 'b') == [1, 0]
    glob = top_k_mask_global(params, 0.5)
    assert keep(glob, 'a') == [1, 1] and keep(glob, 'b') == [0, 0]


def test_uniform_needs_a_survivor():
    with pytest.raises(ContractError):
        top_k_mask_uniform(vector(1.0, 2.0), 0.9)


def test_empty_prunable_set():
    params = ParamSet.from_arrays({'b': np.array([1.0])}, tags={'b': ['bias']})
    with pytest.raises(ContractError):
        top_k_mask_global(params, 0.5)


def test_non_prunable_entries_pass_through():
    params = ParamSet.from_arrays({'w': np.array([0.1, 5.0]), 'b': np.array([0.01, 0.02])}, tags={'b': ['bias']})
    compressed, mask = compress(params, CompressionSpec.top_k_global(0.5))
    assert set(mask.arrays) == {'w'}
    np.testing.assert_array_equal(compressed['b'].data, [0.01, 0.02])


def test_n_m_patterns():
    assert keep(n_m_mask(vector(1.0, -2.0, 0.5, 3.0), 2, 4)) == [0, 1, 0, 1]
    assert keep(n_m_mask(vector(1.0, 1.0, 1.0, 1.0), 2, 4)) == [1, 1, 0, 0]
    assert keep(n_m_mask(vector(8, 7, 6, 5, 4, 3, 2, 1), 4, 8)) == [1, 1, 1, 1, 0, 0, 0, 0]


def test_n_m_indivisible_names_tensor():
    params = ParamSet.from_arrays({'dense0.weight': np.ones((2, 3))})
    with pytest.raises(ShapeError, match='dense0.weight'):
        n_m_mask(params, 2, 4)


def test_n_m_counts_per_block():
    rng = np.random.default_rng(0)
    params = ParamSet.from_arrays({'w': rng.normal(size=(6, 8))})
    mask = n_m_mask(params, 2, 4)
    assert np.all(mask.arrays['w'].reshape(-1, 4).sum(axis=1) == 2)


def test_apply_mask():
    params = vector(3.0, -1.0, 2.0)
    mask = Mask({'w': np.array([True, False, True])})
    once = apply_mask(params, mask)
    np.testing.assert_array_equal(once['w'].data, [3.0, 0.0, 2.0])
    assert apply_mask(once, mask).equal(once)
    assert apply_mask(params, Mask({'w': np.ones(3, dtype=bool)})).equal(params)


def test_apply_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        apply_mask(vector(1.0, 2.0), Mask({'w': np.array([True])}))


def test_mask_linearity():
    rng = np.random.default_rng(1)
    a = ParamSet.from_arrays({'w': rng.normal(size=5)})
    b = ParamSet.from_arrays({'w': rng.normal(size=5)})
    mask = Mask({'w': rng.random(5) > 0.5})
    np.testing.assert_allclose(mask.apply(a.add(b, 2.0))['w'].data,
                               mask.apply(a).add(mask.apply(b), 2.0)['w'].data, rtol=0, atol=1e-15)


def brute_force_top_k(values, k):
    best = None
    for chosen in itertools.combinations(range(values.size), k):
        score = tuple(sorted((-abs(values[i]) for i in chosen)))
        key = (score, chosen)
        if best is None or key < best:
            best = key
    mask = np.zeros(values.size, dtype=bool)
    mask[list(best[1])] = True
    return mask


@pytest.mark.parametrize('seed', range(4))
def test_top_k_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    size = 4 + seed * 2
    values = np.round(rng.normal(size=size), 1)
    for k in range(1, size + 1):
        sparsity = 1.0 - k / size
        mask = top_k_mask_global(vector(*values), max(sparsity, 0.0))
        assert mask.num_kept == k
        np.testing.assert_array_equal(mask.arrays['w'], brute_force_top_k(values, k))


@pytest.mark.parametrize('spec', [
    CompressionSpec.top_k_global(0.7),
    CompressionSpec.top_k_uniform(0.5),
    CompressionSpec.n_m(2, 4),
    CompressionSpec.quantize(4),
])
def test_operators_are_idempotent(spec):
    rng = np.random.default_rng(2)
    params = ParamSet.from_arrays({'w': rng.normal(size=(4, 8)), 'v': rng.normal(size=(3, 4))})
    once, _ = compress(params, spec)
    twice, _ = compress(once, spec)
    assert twice.equal(once)


def test_quantize_hand_example():
    params = ParamSet.from_arrays({'w': np.array([[0.7, -0.3, 0.12]])})
    out = quantize_symmetric(params, 4)['w'].data[0]
    np.testing.assert_allclose(out, [0.7, -0.3, 0.1], atol=1e-12)


def test_quantize_zero_channel_and_error_bound():
    rng = np.random.default_rng(3)
    values = rng.normal(size=(5, 7))
    values[2] = 0.0
    out = quantize_symmetric(ParamSet.from_arrays({'w': values}), 3)['w'].data
    np.testing.assert_array_equal(out[2], np.zeros(7))
    scales = np.max(np.abs(values), axis=1, keepdims=True) / 3
    assert np.all(np.abs(out - values) <= scales / 2 + 1e-12)


def test_quantize_needs_two_bits():
    with pytest.raises(ContractError):
        quantize_symmetric(vector(1.0), 1)


def test_compress_dispatch():
    compressed, mask = compress(vector(0.5, -3.0, 2.0, 0.1), CompressionSpec.top_k_global(0.5))
    np.testing.assert_array_equal(compressed['w'].data, [0.0, -3.0, 2.0, 0.0])
    assert keep(mask) == [0, 1, 1, 0]
    _, none = compress(ParamSet.from_arrays({'w': np.ones((2, 2))}), CompressionSpec.quantize(4))
    assert none is None
    params = vector(0.5, -3.0)
    assert compress(params, CompressionSpec.identity())[0].equal(params)


def test_achieved_sparsity_matches_request():
    rng = np.random.default_rng(4)
    params = ParamSet.from_arrays({'w': rng.normal(size=(7, 11))})
    for sparsity in (0.3, 0.5, 0.9):
        compressed, _ = compress(params, CompressionSpec.top_k_global(sparsity))
        assert abs(achieved_sparsity(compressed) - sparsity) <= 1.0 / 77


def test_sample_operator():
    specs = [CompressionSpec.top_k_global(s) for s in (0.5, 0.7, 0.9)]
    assert sample_operator(specs[:1], np.random.default_rng(0)) == specs[0]
    draws = [sample_operator(specs, np.random.default_rng(5)) for _ in range(3)]
    assert draws[0] == draws[1] == draws[2]
    rng = np.random.default_rng(7)
    counts = {spec: 0 for spec in specs}
    for _ in range(30000):
        counts[sample_operator(specs, rng)] += 1
    for count in counts.values():
        assert abs(count / 30000 - 1.0 / 3.0) <= 0.01
    with pytest.raises(ContractError):
        sample_operator([], rng)


def test_projective_region_with_large_gap():
    params = vector(10.0, 9.0, 0.1, 0.2)
    report = check_projective_region(params, CompressionSpec.top_k_global(0.5), 0.01, 50, np.random.default_rng(0))
    assert report.gap_condition
    assert report.mask_equal_fraction == 1.0
    assert report.violations == 0


def test_projective_region_zero_noise():
    report = check_projective_region(vector(1.0, 1.0), CompressionSpec.top_k_global(0.5), 0.0, 5,
                                     np.random.default_rng(0))
    assert report.mask_equal_fraction == 1.0


def test_projective_region_boundary_point():
    report = check_projective_region(vector(1.0, 1.0, 0.1, 0.2), CompressionSpec.top_k_global(0.75), 1e-6, 50,
                                     np.random.default_rng(0))
    assert not report.gap_condition
    assert report.mask_equal_fraction < 1.0


def test_spec_strings():
    specs = parse_spec_list('topk_global:0.5,0.7,0.9')
    assert [s.sparsity for s in specs] == [0.5, 0.7, 0.9]
    assert parse_spec_list('nm:2:4') == [CompressionSpec.n_m(2, 4)]
    assert parse_spec_list('quant:4')[0].label == 'quant:4'
    assert parse_spec_list('topk_uniform:0.7')[0].kind == 'top_k_uniform'
    with pytest.raises(ContractError):
        parse_spec_list('prune:0.5')
    with pytest.raises(ContractError):
        parse_spec_list('topk_global:abc')


def test_spec_dict_round_trip():
    for spec in (CompressionSpec.top_k_uniform(0.3), CompressionSpec.n_m(2, 4), CompressionSpec.quantize(8)):
        assert CompressionSpec.from_dict(spec.to_dict()) == spec


def test_mask_for_rejects_quantization():
    with pytest.raises(ContractError):
        mask_for(vector(1.0), CompressionSpec.quantize(4))
