"""
Feed-forward classifier: dense layers, batch normalization on the hidden
layers, relu, and smoothed softmax cross-entropy.

Batch-norm running statistics live in a :class:`BNState` next to the
parameters. Its mode decides what a training-mode forward pass does to them:

- ``train_tracking``: exponential moving average with ``momentum``
- ``frozen``: never touched (perturbed passes of the compression-aware
  optimizers run in this mode)
- ``tuning``: cumulative average over the batches seen since the last reset
"""
import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from cramkit import variables
from cramkit.errors import ConfigError, InputError, ShapeError
from cramkit.objective import Objective
from cramkit.params import ParamEntry, ParamSet
from cramkit.tensor import (
    Tape,
    Tensor,
    add,
    div,
    gather,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    scale,
    sqrt,
    sub,
    tsum,
    variance,
)

__all__ = [
    'ModelConfig',
    'BNMode',
    'BNLayerState',
    'BNState',
    'MLP',
    'loss',
    'evaluate',
    'BatchObjective',
]


@dataclass
class ModelConfig:
    layer_widths: list
    use_batchnorm: bool = True
    label_smoothing: float = 0.0
    weight_decay: float = 0.0
    prune_first_layer: bool = True
    prune_last_layer: bool = True
    bn_momentum: float = variables.BN_MOMENTUM
    bn_eps: float = variables.BN_EPS

    def __post_init__(self):
        widths = list(self.layer_widths)
        if any(not isinstance(w, int) or isinstance(w, bool) or w <= 0 for w in widths):
            raise ConfigError('layer widths must be positive integers', field='model.layer_widths')
        if len(widths) < 3:
            raise ConfigError('need input, at least one hidden and an output width', field='model.layer_widths')
        if widths[-1] < 2:
            raise ConfigError('output width must be at least 2', field='model.layer_widths')
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError('must be in [0, 1)', field='model.label_smoothing')
        if self.weight_decay < 0:
            raise ConfigError('must be non-negative', field='model.weight_decay')
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError('must be in (0, 1)', field='model.bn_momentum')
        if self.bn_eps <= 0:
            raise ConfigError('must be positive', field='model.bn_eps')
        self.layer_widths = widths

    @property
    def num_hidden(self):
        return len(self.layer_widths) - 2

    @property
    def num_classes(self):
        return self.layer_widths[-1]

    def to_dict(self):
        return {
            'layer_widths': list(self.layer_widths),
            'use_batchnorm': self.use_batchnorm,
            'label_smoothing': self.label_smoothing,
            'weight_decay': self.weight_decay,
            'prune_first_layer': self.prune_first_layer,
            'prune_last_layer': self.prune_last_layer,
            'bn_momentum': self.bn_momentum,
            'bn_eps': self.bn_eps,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class BNMode(str, Enum):
    TRAIN_TRACKING = 'train_tracking'
    FROZEN = 'frozen'
    TUNING = 'tuning'


@dataclass
class BNLayerState:
    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches_tracked: int = 0


@dataclass
class BNState:
    layers: list = field(default_factory=list)
    momentum: float = variables.BN_MOMENTUM
    eps: float = variables.BN_EPS
    mode: BNMode = BNMode.TRAIN_TRACKING

    @classmethod
    def fresh(cls, widths, momentum=variables.BN_MOMENTUM, eps=variables.BN_EPS):
        layers = [BNLayerState(np.zeros(w), np.ones(w)) for w in widths]
        return cls(layers, momentum, eps, BNMode.TRAIN_TRACKING)

    def reset(self):
        """
        Back to the (0, 1) prior with no batches tracked.
        """
        for layer in self.layers:
            layer.running_mean = np.zeros_like(layer.running_mean)
            layer.running_var = np.ones_like(layer.running_var)
            layer.num_batches_tracked = 0

    def copy(self):
        return copy.deepcopy(self)

    def restore(self, saved):
        """
        Takes over the running statistics of ``saved``; the mode stays.
        """
        self.layers = copy.deepcopy(saved.layers)

    def equal(self, other):
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.running_mean.tobytes() == b.running_mean.tobytes()
            and a.running_var.tobytes() == b.running_var.tobytes()
            for a, b in zip(self.layers, other.layers)
        )

    def update(self, index, batch_mean, batch_var):
        layer = self.layers[index]
        if self.mode == BNMode.FROZEN:
            return
        layer.num_batches_tracked += 1
        if self.mode == BNMode.TUNING:
            weight = 1.0 / layer.num_batches_tracked
        else:
            weight = self.momentum
        layer.running_mean = (1.0 - weight) * layer.running_mean + weight * batch_mean
        layer.running_var = np.maximum((1.0 - weight) * layer.running_var + weight * batch_var, 0.0)


class MLP:
    """
    Multi-layer perceptron with optional batch normalization.

    Args:
        config (ModelConfig): Architecture
        params (ParamSet, optional): Parameters; freshly initialized from
            ``seed`` when omitted
        bn_state (BNState, optional): Running statistics; fresh when omitted
        seed (int): Initialization seed
    """

    def __init__(self, config, params=None, bn_state=None, seed=0):
        self.config = config
        self.params = params if params is not None else self.init_params(config, seed)
        if bn_state is None:
            widths = config.layer_widths[1:-1] if config.use_batchnorm else []
            bn_state = BNState.fresh(widths, config.bn_momentum, config.bn_eps)
        self.bn_state = bn_state

    @staticmethod
    def init_params(config, seed=0):
        """
        Uniform in +-sqrt(6 / (fan_in + fan_out)) per dense layer; zero
        biases and shifts, unit batch-norm scales.

        Returns:
            ParamSet: Parameters with prunability set by the config's policy
        """
        rng = np.random.default_rng(seed)
        widths = config.layer_widths
        last = len(widths) - 2
        entries = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            tags = {'weight'}
            prunable = True
            if i == 0:
                tags.add('first_layer')
                prunable = prunable and config.prune_first_layer
            if i == last:
                tags.add('last_layer')
                prunable = prunable and config.prune_last_layer
            entries.append(ParamEntry('dense{}.weight'.format(i), Tensor(weight, requires_grad=True),
                                      prunable, frozenset(tags)))
            if config.use_batchnorm and i != last:
                entries.append(ParamEntry('bn{}.scale'.format(i), Tensor(np.ones(fan_out), requires_grad=True),
                                          False, frozenset(('bn_scale',))))
                entries.append(ParamEntry('bn{}.shift'.format(i), Tensor(np.zeros(fan_out), requires_grad=True),
                                          False, frozenset(('bn_shift',))))
            else:
                entries.append(ParamEntry('dense{}.bias'.format(i), Tensor(np.zeros(fan_out), requires_grad=True),
                                          False, frozenset(('bias',))))
        return ParamSet(entries)

    def clone(self):
        return MLP(self.config, self.params, self.bn_state.copy())

    @property
    def has_batchnorm(self):
        return bool(self.bn_state.layers)

    def forward(self, batch, mode='train', params=None):
        """
        Args:
            batch (Tensor or array): Inputs of shape ``(B, D)``
            mode (str): ``train`` normalizes with batch statistics and feeds
                the running statistics according to ``bn_state.mode``;
                ``eval`` normalizes with the running statistics
            params (ParamSet, optional): Evaluate at these parameters instead
                of ``self.params``

        Returns:
            Tensor: Logits of shape ``(B, C)``
        """
        params = self.params if params is None else params
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        widths = self.config.layer_widths
        if len(x.shape) != 2 or x.shape[1] != widths[0]:
            raise ShapeError('batch of shape {} does not match input width {}'.format(x.shape, widths[0]))
        if mode not in ('train', 'eval'):
            raise ValueError('mode must be train or eval, got {!r}'.format(mode))
        h = x
        for i in range(self.config.num_hidden):
            z = matmul(h, params['dense{}.weight'.format(i)], transpose_b=True)
            if self.has_batchnorm:
                z = self._batchnorm(i, z, params, mode)
            else:
                z = add(z, params['dense{}.bias'.format(i)])
            h = relu(z)
        last = self.config.num_hidden
        out = matmul(h, params['dense{}.weight'.format(last)], transpose_b=True)
        return add(out, params['dense{}.bias'.format(last)])

    def _batchnorm(self, i, z, params, mode):
        state = self.bn_state
        if mode == 'train':
            batch_mean = mean(z, axis=0)
            batch_var = variance(z, axis=0)
            state.update(i, batch_mean.data, batch_var.data)
            normed = div(sub(z, batch_mean), sqrt(add(batch_var, state.eps)))
        else:
            layer = state.layers[i]
            normed = div(sub(z, layer.running_mean), np.sqrt(layer.running_var + state.eps))
        return add(mul(normed, params['bn{}.scale'.format(i)]), params['bn{}.shift'.format(i)])


def loss(logits, labels, label_smoothing=0.0, params=None, weight_decay=0.0):
    """
    Mean smoothed cross-entropy plus ``weight_decay / 2`` times the squared
    norm of every entry tagged ``weight``.

    Args:
        logits (Tensor): Shape ``(B, C)``
        labels (array): Integer classes of length ``B``
        label_smoothing (float): Mass spread uniformly over the classes
        params (ParamSet, optional): Needed when ``weight_decay > 0``
        weight_decay (float): L2 coefficient

    Returns:
        Tensor: Scalar loss
    """
    labels = np.asarray(labels)
    num_classes = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError('expected {} labels, got shape {}'.format(logits.shape[0], labels.shape))
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise InputError('labels must lie in [0, {})'.format(num_classes))
    logp = log_softmax(logits)
    total = scale(mean(gather(logp, labels.astype(np.int64))), -(1.0 - label_smoothing))
    if label_smoothing > 0:
        total = add(total, scale(mean(tsum(logp, axis=1)), -label_smoothing / num_classes))
    if weight_decay > 0 and params is not None:
        for entry in params:
            if 'weight' in entry.tags:
                total = add(total, scale(tsum(mul(entry.tensor, entry.tensor)), weight_decay / 2.0))
    return total


def _split_arrays(dataset, split):
    if isinstance(dataset, tuple):
        return dataset
    return dataset.arrays(split)


def evaluate(model, dataset, split='test', batch_size=1024):
    """
    Top-1 accuracy in eval mode; argmax ties go to the lowest class index.

    Args:
        model (MLP): Model to score
        dataset: A :class:`~cramkit.data.Dataset` or a ``(features, labels)``
            tuple
        split (str): Dataset split to score

    Returns:
        float: Fraction of correct predictions
    """
    features, labels = _split_arrays(dataset, split)
    if len(labels) == 0:
        raise InputError('cannot evaluate on an empty dataset')
    correct = 0
    with Tape(frozen=True):
        for start in range(0, len(labels), batch_size):
            logits = model.forward(features[start:start + batch_size], mode='eval')
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[start:start + batch_size]))
    return correct / len(labels)


class BatchObjective(Objective):
    """
    Training loss of ``model`` on one mini-batch.

    Dense passes (``track_stats=True``) run with the model's batch-norm
    state in tracking mode; every other pass runs it frozen.
    """

    def __init__(self, model, features, labels):
        super().__init__()
        self.model = model
        self.features = features if isinstance(features, Tensor) else Tensor(features)
        self.labels = np.asarray(labels)

    def _loss(self, params, track_stats):
        state = self.model.bn_state
        previous = state.mode
        state.mode = BNMode.TRAIN_TRACKING if track_stats else BNMode.FROZEN
        try:
            logits = self.model.forward(self.features, mode='train', params=params)
        finally:
            state.mode = previous
        config = self.model.config
        return loss(logits, self.labels, config.label_smoothing, params, config.weight_decay)

    def snapshot(self):
        return self.model.bn_state.copy()

    def restore(self, saved):
        self.model.bn_state.restore(saved)
