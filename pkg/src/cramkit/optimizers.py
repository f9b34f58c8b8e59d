"""
Compression-aware optimizers.

Every step takes an :class:`~cramkit.objective.Objective` (the loss on the
current mini-batch), the parameters ``w`` and returns new parameters. The
family:

- ``sgd``: one pass, ``w <- w - lr * buffer`` with momentum and weight decay
- ``sam``: ascend to ``w + rho * g / |g|``, descend with the gradient there
- ``cram``: ascend to ``C(w + rho * g)``, descend with the gradient there
- ``cram_plus``: same, adding the dense gradient ``g`` to the direction
- ``c_sam``: normalized ascent from the gradient of the compressed model
- ``top_k_plus``: dense gradient plus the masked gradient at ``C(w)``
- ``top_k``: gradient at ``C(w)`` only

Batch-norm statistics are tracked on the first pass of a step only.
Momentum and weight decay act on the final direction of each step.
"""
from collections import namedtuple
from dataclasses import dataclass, field, replace

import numpy as np

from cramkit import logger, variables
from cramkit.compression import CompressionSpec, compress, mask_for, sample_operator
from cramkit.errors import ConfigError, ContractError, NumericDomainError

__all__ = [
    'ALGORITHMS',
    'OptimizerConfig',
    'OptimizerState',
    'CachedMask',
    'MaskDiff',
    'Optimizer',
    'sgd_step',
    'sam_step',
    'cram_step',
    'cram_plus_step',
    'c_sam_step',
    'top_k_plus_step',
    'top_k_step',
    'resolve_mask',
    'mixed_step',
    'multi_operator_set',
]

ALGORITHMS = ('sgd', 'sam', 'cram', 'cram_plus', 'c_sam', 'top_k_plus', 'top_k')
OPERATOR_ALGORITHMS = ('cram', 'cram_plus', 'c_sam', 'top_k_plus', 'top_k')
ASCENT_ALGORITHMS = ('sam', 'cram', 'cram_plus', 'c_sam')
PASSES_PER_STEP = {
    'sgd': 1, 'sam': 2, 'cram': 2, 'cram_plus': 2, 'c_sam': 2, 'top_k_plus': 2, 'top_k': 1,
}

MaskDiff = namedtuple('MaskDiff', ['step', 'fraction', 'spec'])


def multi_operator_set(sparsities=variables.DEFAULT_MULTI_SPARSITIES, kind='top_k_global'):
    """
    Top-K operators at several sparsities, sampled per step by the Multi
    variants.
    """
    return [CompressionSpec(kind, sparsity=float(s)) for s in sparsities]


@dataclass
class OptimizerConfig:
    algorithm: str = 'sgd'
    learning_rate: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    rho: float = variables.DEFAULT_RHO
    operator_set: list = field(default_factory=list)
    sparse_perturbed_grad: bool = False
    mask_refresh_period: int = 1
    p_plain_step: float = 0.0
    normalize_ascent: bool = False
    allow_degenerate: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError('unknown algorithm {!r}, expected one of {}'.format(
                self.algorithm, ', '.join(ALGORITHMS)), field='optimizer.algorithm')
        if not self.learning_rate > 0:
            raise ConfigError('must be positive', field='optimizer.learning_rate')
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError('must be in [0, 1)', field='optimizer.momentum')
        if self.weight_decay < 0:
            raise ConfigError('must be non-negative', field='optimizer.weight_decay')
        if self.rho < 0:
            raise ConfigError('must be non-negative', field='optimizer.rho')
        if self.algorithm in ASCENT_ALGORITHMS and self.rho == 0 and not self.allow_degenerate:
            raise ConfigError('{} needs rho > 0'.format(self.algorithm), field='optimizer.rho')
        self.operator_set = [
            spec if isinstance(spec, CompressionSpec) else CompressionSpec.from_dict(spec)
            for spec in self.operator_set
        ]
        if self.algorithm in OPERATOR_ALGORITHMS and not self.operator_set:
            raise ConfigError('{} needs at least one compression operator'.format(self.algorithm),
                              field='optimizer.operator_set')
        if self.algorithm in ('top_k_plus', 'c_sam') and any(not s.is_mask_kind for s in self.operator_set):
            raise ConfigError('{} needs mask-inducing operators'.format(self.algorithm),
                              field='optimizer.operator_set')
        if self.mask_refresh_period < 1:
            raise ConfigError('must be at least 1', field='optimizer.mask_refresh_period')
        if not 0.0 <= self.p_plain_step <= 1.0:
            raise ConfigError('must be in [0, 1]', field='optimizer.p_plain_step')

    @property
    def passes_per_step(self):
        return PASSES_PER_STEP[self.algorithm]

    def to_dict(self):
        return {
            'algorithm': self.algorithm,
            'learning_rate': self.learning_rate,
            'momentum': self.momentum,
            'weight_decay': self.weight_decay,
            'rho': self.rho,
            'operator_set': [spec.to_dict() for spec in self.operator_set],
            'sparse_perturbed_grad': self.sparse_perturbed_grad,
            'mask_refresh_period': self.mask_refresh_period,
            'p_plain_step': self.p_plain_step,
            'normalize_ascent': self.normalize_ascent,
            'allow_degenerate': self.allow_degenerate,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class CachedMask:
    mask: object
    created_at: int
    uses: int = 1


@dataclass
class OptimizerState:
    rng: np.random.Generator
    mask_refresh_period: int = 1
    momentum_buffers: dict = field(default_factory=dict)
    step_counter: int = 0
    cached_masks: dict = field(default_factory=dict)
    mask_diff_log: list = field(default_factory=list)
    step_kinds: dict = field(default_factory=lambda: {'plain': 0, 'compression': 0})
    aborted_steps: int = 0

    @classmethod
    def create(cls, cfg):
        return cls(rng=np.random.default_rng(cfg.seed), mask_refresh_period=cfg.mask_refresh_period)

    def snapshot(self):
        """
        Everything but the momentum buffers a step may touch before it
        fails; see :meth:`restore`.
        """
        return (
            self.rng.bit_generator.state,
            {spec: replace(cached) for spec, cached in self.cached_masks.items()},
            list(self.mask_diff_log),
            dict(self.step_kinds),
        )

    def restore(self, saved):
        rng_state, cached_masks, mask_diff_log, step_kinds = saved
        self.rng.bit_generator.state = rng_state
        self.cached_masks = cached_masks
        self.mask_diff_log = mask_diff_log
        self.step_kinds = step_kinds


def _check_finite(grads, what):
    if not grads.all_finite():
        raise NumericDomainError('{} is not finite'.format(what))


def sgd_step(params, state, grad, lr, momentum=0.0, weight_decay=0.0):
    """
    ``buffer <- momentum * buffer + grad + weight_decay * w``,
    ``w <- w - lr * buffer``.

    Nothing is committed when a value turns non-finite: the error propagates
    with ``params`` and the momentum buffers untouched.

    Returns:
        ParamSet: Updated parameters
    """
    _check_finite(grad, 'gradient')
    gradients = grad.arrays()
    buffers = {}
    values = {}
    with np.errstate(over='ignore', invalid='ignore'):
        for entry in params:
            w = entry.tensor.data
            d = gradients[entry.name]
            if weight_decay:
                d = d + weight_decay * w
            previous = state.momentum_buffers.get(entry.name)
            if momentum and previous is not None:
                d = momentum * previous + d
            buffers[entry.name] = d
            values[entry.name] = w - lr * d
    updated = params.with_values(values)
    if momentum:
        state.momentum_buffers = buffers
    return updated


def _lr(cfg, lr):
    return cfg.learning_rate if lr is None else lr


def _descend(params, state, cfg, direction, lr):
    return sgd_step(params, state, direction, _lr(cfg, lr), cfg.momentum, cfg.weight_decay)


def _normalized_ascent(params, grads, rho):
    return params.add(grads, rho / grads.norm())


def _zero_norm_fallback(params, state, cfg, grads, lr, algorithm):
    logger.log_event('fallback', {
        'algorithm': algorithm,
        'step': state.step_counter,
        'reason': 'zero gradient norm, plain step taken',
    })
    return _descend(params, state, cfg, grads, lr)


def sam_step(objective, params, state, cfg, lr=None):
    """
    ``w~ = w + rho * g / |g|``; descend with the gradient at ``w~``.
    """
    _, grads = objective.value_and_grad(params, track_stats=True)
    _check_finite(grads, 'dense gradient')
    if grads.norm() == 0.0:
        return _zero_norm_fallback(params, state, cfg, grads, lr, 'sam')
    perturbed = _normalized_ascent(params, grads, cfg.rho)
    _, perturbed_grads = objective.value_and_grad(perturbed, track_stats=False)
    return _descend(params, state, cfg, perturbed_grads, lr)


def resolve_mask(state, spec, candidate, period=None):
    """
    Mask of ``spec`` on ``candidate``, reusing the cached one until it has
    served ``period`` steps in which ``spec`` was drawn.

    Every recomputation after the first appends the fraction of entries
    that changed to ``state.mask_diff_log``.

    Returns:
        Mask: Mask to project with this step
    """
    period = state.mask_refresh_period if period is None else period
    cached = state.cached_masks.get(spec)
    if cached is not None and cached.uses < period:
        cached.uses += 1
        return cached.mask
    mask = mask_for(candidate, spec)
    if cached is not None:
        state.mask_diff_log.append(MaskDiff(state.step_counter, mask.difference(cached.mask), spec.label))
    state.cached_masks[spec] = CachedMask(mask, state.step_counter)
    return mask


def _compressed_perturbation(params, grads, spec, state, cfg):
    """
    ``C(w + rho * g)`` and the mask that produced it (None for quantization).
    """
    if cfg.normalize_ascent and grads.norm() > 0.0:
        interpolated = _normalized_ascent(params, grads, cfg.rho)
    else:
        interpolated = params.add(grads, cfg.rho)
    if spec.is_mask_kind:
        mask = resolve_mask(state, spec, interpolated)
        return mask.apply(interpolated), mask
    compressed, _ = compress(interpolated, spec)
    return compressed, None


def _cram_direction(objective, params, state, cfg, plus):
    _, grads = objective.value_and_grad(params, track_stats=True)
    _check_finite(grads, 'dense gradient')
    spec = sample_operator(cfg.operator_set, state.rng)
    perturbed, mask = _compressed_perturbation(params, grads, spec, state, cfg)
    _, perturbed_grads = objective.value_and_grad(perturbed, track_stats=False)
    if mask is not None and cfg.sparse_perturbed_grad:
        perturbed_grads = mask.apply(perturbed_grads)
    if plus:
        return perturbed_grads.add(grads)
    return perturbed_grads


def cram_step(objective, params, state, cfg, lr=None):
    """
    ``w~ = C(w + rho * g)``, descend with ``g~ = grad L(w~)``, projected on
    the mask of ``w~`` when sparse perturbed gradients are on.
    """
    direction = _cram_direction(objective, params, state, cfg, plus=False)
    return _descend(params, state, cfg, direction, lr)


def cram_plus_step(objective, params, state, cfg, lr=None):
    """
    As :func:`cram_step` with direction ``g~ + g``, reusing the dense
    gradient of the first pass.
    """
    direction = _cram_direction(objective, params, state, cfg, plus=True)
    return _descend(params, state, cfg, direction, lr)


def c_sam_step(objective, params, state, cfg, lr=None):
    """
    ``w~ = C(w + rho * h / |h|)`` with ``h`` the gradient at ``C(w)``;
    descend with the gradient at ``w~``. Both compressed gradients are mask
    projected when sparse perturbed gradients are on.
    """
    spec = sample_operator(cfg.operator_set, state.rng)
    mask = mask_for(params, spec)
    _, grads = objective.value_and_grad(mask.apply(params), track_stats=True)
    _check_finite(grads, 'compressed gradient')
    if cfg.sparse_perturbed_grad:
        grads = mask.apply(grads)
    if grads.norm() == 0.0:
        return _zero_norm_fallback(params, state, cfg, grads, lr, 'c_sam')
    interpolated = _normalized_ascent(params, grads, cfg.rho)
    perturbed_mask = mask_for(interpolated, spec)
    _, perturbed_grads = objective.value_and_grad(perturbed_mask.apply(interpolated), track_stats=False)
    if cfg.sparse_perturbed_grad:
        perturbed_grads = perturbed_mask.apply(perturbed_grads)
    return _descend(params, state, cfg, perturbed_grads, lr)


def _require_mask_kind(spec, algorithm):
    if not spec.is_mask_kind:
        raise ContractError('{} needs a mask-inducing operator, got {}'.format(algorithm, spec.kind))


def top_k_plus_step(objective, params, state, cfg, lr=None):
    """
    ``w <- w - lr * (g + M * grad L(M * w))`` with ``M`` the mask of ``w``;
    no ascent step.
    """
    _, grads = objective.value_and_grad(params, track_stats=True)
    _check_finite(grads, 'dense gradient')
    spec = sample_operator(cfg.operator_set, state.rng)
    _require_mask_kind(spec, 'top_k_plus')
    mask = resolve_mask(state, spec, params)
    _, compressed_grads = objective.value_and_grad(mask.apply(params), track_stats=False)
    return _descend(params, state, cfg, grads.add(mask.apply(compressed_grads)), lr)


def top_k_step(objective, params, state, cfg, lr=None):
    """
    ``w <- w - lr * grad L(C(w))``: the unmasked gradient at the compressed
    point, one pass.
    """
    spec = sample_operator(cfg.operator_set, state.rng)
    if spec.is_mask_kind:
        compressed = resolve_mask(state, spec, params).apply(params)
    else:
        compressed, _ = compress(params, spec)
    _, grads = objective.value_and_grad(compressed, track_stats=True)
    return _descend(params, state, cfg, grads, lr)


def _plain_step(objective, params, state, cfg, lr=None):
    _, grads = objective.value_and_grad(params, track_stats=True)
    return _descend(params, state, cfg, grads, lr)


STEP_FUNCTIONS = {
    'sgd': _plain_step,
    'sam': sam_step,
    'cram': cram_step,
    'cram_plus': cram_plus_step,
    'c_sam': c_sam_step,
    'top_k_plus': top_k_plus_step,
    'top_k': top_k_step,
}


def mixed_step(objective, params, state, cfg, lr=None):
    """
    With probability ``p_plain_step`` a plain base-optimizer step, otherwise
    the configured algorithm's step. The draw comes from ``state.rng``.
    """
    if state.rng.random() < cfg.p_plain_step:
        state.step_kinds['plain'] += 1
        return _plain_step(objective, params, state, cfg, lr)
    state.step_kinds['compression' if cfg.algorithm != 'sgd' else 'plain'] += 1
    return STEP_FUNCTIONS[cfg.algorithm](objective, params, state, cfg, lr)


class Optimizer:
    """
    Owns the configuration and mutable state of one training run.

    Args:
        cfg (OptimizerConfig): Algorithm and hyperparameters
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.state = OptimizerState.create(cfg)

    def step(self, objective, params, lr=None):
        """
        Runs one step. A step hitting non-finite values is skipped: the
        parameters, the optimizer state and the objective's normalization
        statistics are left as they were before the step.

        Returns:
            tuple: ``(parameters, applied)``; ``applied`` is False when the
            step was aborted and ``params`` is returned unchanged
        """
        self.state.step_counter += 1
        saved = self.state.snapshot(), objective.snapshot()
        try:
            return mixed_step(objective, params, self.state, self.cfg, lr), True
        except NumericDomainError as e:
            self.state.restore(saved[0])
            objective.restore(saved[1])
            self.state.aborted_steps += 1
            logger.log_event('step_aborted', {
                'algorithm': self.cfg.algorithm,
                'step': self.state.step_counter,
                'error': str(e),
            })
            return params, False
