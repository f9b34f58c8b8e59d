import numpy as np
import pytest

from cramkit import logger
from cramkit.compression import CompressionSpec, compress
from cramkit.errors import ConfigError
from cramkit.model import MLP, BatchObjective
from cramkit.objective import FunctionObjective
from cramkit.optimizers import (
    Optimizer,
    OptimizerConfig,
    OptimizerState,
    c_sam_step,
    cram_plus_step,
    cram_step,
    mixed_step,
    multi_operator_set,
    resolve_mask,
    sam_step,
    sgd_step,
    top_k_plus_step,
    top_k_step,
)
from cramkit.params import ParamSet
from cramkit.tensor import Tensor, mul, scale, sub, tsum

from conftest import half_square, vector

TOP_1 = CompressionSpec.top_k_global(0.5)


def config(algorithm, **kwargs):
    kwargs.setdefault('learning_rate', 0.1)
    if algorithm not in ('sgd', 'sam'):
        kwargs.setdefault('operator_set', [TOP_1])
    return OptimizerConfig(algorithm=algorithm, **kwargs)


def state_for(cfg):
    return OptimizerState.create(cfg)


def values(params):
    return params['w'].data.tolist()


def exact(expected):
    return pytest.approx(expected, rel=0, abs=1e-12)


def test_sgd_trace():
    params = vector(1.0, 2.0)
    cfg = config('sgd')
    out = sgd_step(params, state_for(cfg), params, 0.1)
    assert values(out) == exact([0.9, 1.8])


def test_sgd_momentum_accumulates():
    params = vector(1.0)
    cfg = config('sgd', momentum=0.5)
    state = state_for(cfg)
    grad = vector(1.0)
    first = sgd_step(params, state, grad, 0.1, momentum=0.5)
    second = sgd_step(first, state, grad, 0.1, momentum=0.5)
    assert values(second) == exact([1.0 - 0.1 - 0.15])


def test_sam_trace(quadratic):
    cfg = config('sam', rho=0.05)
    out = sam_step(quadratic, vector(3.0, 4.0), state_for(cfg), cfg)
    assert values(out) == exact([2.697, 3.596])
    assert quadratic.passes == 2


def test_cram_trace(quadratic):
    cfg = config('cram', rho=0.1)
    out = cram_step(quadratic, vector(1.0, 2.0), state_for(cfg), cfg)
    assert values(out) == exact([1.0, 1.78])
    assert quadratic.passes == 2


def test_cram_plus_trace(quadratic):
    cfg = config('cram_plus', rho=0.1)
    out = cram_plus_step(quadratic, vector(1.0, 2.0), state_for(cfg), cfg)
    assert values(out) == exact([0.9, 1.58])
    assert quadratic.passes == 2


@pytest.mark.parametrize('sparse', [False, True])
def test_c_sam_trace(quadratic, sparse):
    cfg = config('c_sam', rho=0.1, sparse_perturbed_grad=sparse)
    out = c_sam_step(quadratic, vector(3.0, 4.0), state_for(cfg), cfg)
    assert values(out) == exact([3.0, 3.59])
    assert quadratic.passes == 2


def test_top_k_plus_trace(quadratic):
    cfg = config('top_k_plus')
    out = top_k_plus_step(quadratic, vector(1.0, 2.0), state_for(cfg), cfg)
    assert values(out) == exact([0.9, 1.6])
    assert quadratic.passes == 2


def test_top_k_trace(quadratic):
    cfg = config('top_k')
    out = top_k_step(quadratic, vector(1.0, 2.0), state_for(cfg), cfg)
    assert values(out) == exact([1.0, 1.8])
    assert quadratic.passes == 1


def test_sparse_perturbed_gradient_is_masked():
    # L = 0.5 * (w0 + w1)^2 has gradient (w0 + w1, w0 + w1)
    objective = FunctionObjective(lambda p: scale(mul(tsum(p['w']), tsum(p['w'])), 0.5))
    cfg = config('cram', rho=0.1, sparse_perturbed_grad=True)
    out = cram_step(objective, vector(1.0, 2.0), state_for(cfg), cfg)
    # w~ = C([1.3, 2.3]) = [0, 2.3]; masked gradient [0, 2.3]
    assert values(out) == exact([1.0, 1.77])


def run(cfg, steps=100, start=(0.3, -1.2, 2.5, 0.7)):
    params = vector(*start)
    optimizer = Optimizer(cfg)
    objective = half_square()
    for _ in range(steps):
        params, applied = optimizer.step(objective, params)
        assert applied
    return params


@pytest.mark.parametrize('momentum', [0.0, 0.9])
def test_cram_with_identity_and_zero_rho_is_sgd(momentum):
    sgd = run(config('sgd', momentum=momentum))
    cram = run(config('cram', momentum=momentum, rho=0.0, allow_degenerate=True,
                      operator_set=[CompressionSpec.identity()]))
    assert cram.equal(sgd)


def test_sam_with_zero_rho_is_sgd():
    assert run(config('sam', rho=0.0, allow_degenerate=True)).equal(run(config('sgd')))


def test_normalized_cram_with_identity_is_sam():
    sam = run(config('sam', rho=0.05))
    cram = run(config('cram', rho=0.05, normalize_ascent=True, operator_set=[CompressionSpec.identity()]))
    assert cram.equal(sam)


def test_always_plain_cram_is_sgd():
    cram = run(config('cram', rho=0.05, p_plain_step=1.0))
    assert cram.equal(run(config('sgd')))


def test_degenerate_configurations_are_rejected():
    with pytest.raises(ConfigError, match='optimizer.rho'):
        config('sam', rho=0.0)
    with pytest.raises(ConfigError, match='optimizer.operator_set'):
        OptimizerConfig(algorithm='cram')
    with pytest.raises(ConfigError, match='optimizer.operator_set'):
        config('top_k_plus', operator_set=[CompressionSpec.quantize(4)])
    with pytest.raises(ConfigError, match='optimizer.algorithm'):
        OptimizerConfig(algorithm='adam')
    with pytest.raises(ConfigError, match='optimizer.p_plain_step'):
        config('sgd', p_plain_step=1.5)


def test_config_dict_round_trip():
    cfg = config('cram_plus', momentum=0.9, operator_set=multi_operator_set())
    again = OptimizerConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert [s.sparsity for s in again.operator_set] == [0.5, 0.7, 0.9]


def test_resolve_mask_reuses_cached_mask():
    cfg = config('cram', mask_refresh_period=3)
    state = state_for(cfg)
    first = resolve_mask(state, TOP_1, vector(1.0, 2.0))
    state.step_counter += 1
    second = resolve_mask(state, TOP_1, vector(5.0, 0.1))
    assert second is first
    state.step_counter += 1
    assert resolve_mask(state, TOP_1, vector(5.0, 0.1)) is first
    state.step_counter += 1
    fresh = resolve_mask(state, TOP_1, vector(5.0, 0.1))
    assert fresh.arrays['w'].tolist() == [True, False]
    assert len(state.mask_diff_log) == 1
    assert state.mask_diff_log[0].fraction == 1.0


def test_refresh_every_step_logs_each_recomputation():
    cfg = config('cram', rho=0.05)
    optimizer = Optimizer(cfg)
    params = vector(1.0, 2.0)
    for _ in range(5):
        params, _ = optimizer.step(half_square(), params)
    assert len(optimizer.state.mask_diff_log) == 4
    assert all(diff.fraction == 0.0 for diff in optimizer.state.mask_diff_log)


def test_mixed_step_fraction():
    cfg = config('cram', p_plain_step=0.5, seed=11)
    state = state_for(cfg)
    objective = half_square()
    params = vector(1.0, 2.0)
    for _ in range(10000):
        mixed_step(objective, params, state, cfg)
    assert abs(state.step_kinds['plain'] - 5000) <= 100
    assert state.step_kinds['plain'] + state.step_kinds['compression'] == 10000


def test_aborted_step_leaves_parameters_unchanged():
    cfg = config('sgd', momentum=0.9)
    optimizer = Optimizer(cfg)
    params = vector(1e200, 1.0)
    out, applied = optimizer.step(half_square(), params)
    assert not applied
    assert out is params
    assert optimizer.state.aborted_steps == 1
    assert optimizer.state.momentum_buffers == {}
    assert logger.get_logs('step_aborted')[0]['data']['step'] == 1


def test_zero_gradient_sam_falls_back_to_plain_step(quadratic):
    cfg = config('sam')
    out = sam_step(quadratic, vector(0.0, 0.0), state_for(cfg), cfg)
    assert values(out) == [0.0, 0.0]
    assert logger.get_logs('fallback')


def test_multi_operator_sampling_is_seeded():
    cfg = config('cram', operator_set=multi_operator_set(), seed=4)
    params = ParamSet.from_arrays({'w': np.linspace(-1.0, 1.0, 10)})
    first = run_params(cfg, params)
    second = run_params(cfg, params)
    assert first.equal(second)


def run_params(cfg, params, steps=20):
    optimizer = Optimizer(cfg)
    for _ in range(steps):
        params, _ = optimizer.step(half_square(), params)
    return params


def test_c_sam_with_identity_is_sam():
    sam = run(config('sam', rho=0.05))
    c_sam = run(config('c_sam', rho=0.05, operator_set=[CompressionSpec.identity()]))
    assert c_sam.equal(sam)


def test_cram_plus_with_identity_doubles_the_gradient():
    sgd = run(config('sgd', learning_rate=0.1))
    cram_plus = run(config('cram_plus', learning_rate=0.05, rho=0.0, allow_degenerate=True,
                           operator_set=[CompressionSpec.identity()]))
    assert cram_plus.equal(sgd)


def test_cram_recovers_a_sparse_optimum():
    target = np.array([3.0, 0.0, -2.0, 0.0])
    objective = FunctionObjective(
        lambda p: scale(tsum(mul(sub(p['w'], Tensor(target)), sub(p['w'], Tensor(target)))), 0.5))
    optimizer = Optimizer(config('cram', rho=0.05))
    params = vector(1.0, 1.0, 1.0, 1.0)
    for _ in range(2000):
        params, _ = optimizer.step(objective, params)
    compressed, _ = compress(params, TOP_1)
    assert np.linalg.norm(compressed['w'].data - target) < 1e-6


def test_plain_step_is_one_pass(quadratic):
    optimizer = Optimizer(config('sgd'))
    optimizer.step(quadratic, vector(1.0, 2.0))
    assert quadratic.passes == 1


def test_aborted_step_rolls_back_masks_draws_and_statistics(blobs, small_config):
    model = MLP(small_config, seed=0)
    features, labels = blobs.arrays('train')
    objective = BatchObjective(model, features[:16], labels[:16])
    # a huge ascent overflows the perturbed pass after the dense pass has run
    cfg = config('cram', rho=1e290, sparse_perturbed_grad=True, seed=2)
    optimizer = Optimizer(cfg)
    statistics = model.bn_state.copy()
    params, applied = optimizer.step(objective, model.params)
    assert not applied
    assert params is model.params
    assert objective.passes >= 1
    assert model.bn_state.equal(statistics)
    assert optimizer.state.cached_masks == {}
    assert optimizer.state.mask_diff_log == []
    assert optimizer.state.step_kinds == {'plain': 0, 'compression': 0}
    assert optimizer.state.rng.random() == OptimizerState.create(cfg).rng.random()
    assert optimizer.state.aborted_steps == 1
