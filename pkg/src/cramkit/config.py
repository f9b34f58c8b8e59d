"""
Experiment configuration: one JSON document, validated field by field
before any work starts.

Example::

    {
        "seed": 0,
        "dataset": {"kind": "gaussian_mixture", "n": 400, "num_classes": 4, "noise": 0.5},
        "model": {"layer_widths": [2, 32, 32, 4]},
        "optimizer": {"algorithm": "cram_plus", "learning_rate": 0.05, "rho": 0.05,
                      "operator_set": ["topk_global:0.5,0.7,0.9"], "sparse_perturbed_grad": true},
        "training": {"epochs": 20, "batch_size": 32, "schedule": "cosine"},
        "sweep": {"specs": "topk_global:0.5,0.7,0.9", "trials": 10},
        "output": {"checkpoint": "runs/cram.ckpt"}
    }
"""
import json
import os
import typing
from dataclasses import MISSING, dataclass, field, fields

from cramkit import variables
from cramkit.compression import CompressionSpec, parse_spec_list
from cramkit.data import load_mnist_idx, make_synthetic
from cramkit.errors import ConfigError, ContractError
from cramkit.harness import SCHEDULES
from cramkit.model import ModelConfig
from cramkit.optimizers import OptimizerConfig

__all__ = [
    'DatasetConfig',
    'TrainingConfig',
    'SweepConfig',
    'OutputConfig',
    'RunConfig',
    'parse_specs',
]

DATASET_KINDS = ('gaussian_mixture', 'two_spirals', 'mnist_idx')


def parse_specs(value, field_name):
    """
    Compression specs from a spec string, a list of spec strings or a list
    of spec dicts.

    Returns:
        list: CompressionSpec items
    """
    items = [value] if isinstance(value, str) else value
    if not isinstance(items, list):
        raise ConfigError('expected a spec string or a list of specs', field=field_name)
    specs = []
    try:
        for item in items:
            if isinstance(item, str):
                specs.extend(parse_spec_list(item))
            elif isinstance(item, dict):
                specs.append(CompressionSpec.from_dict(item))
            else:
                raise ConfigError('expected a spec string or object, got {!r}'.format(item), field=field_name)
    except (ContractError, TypeError, ValueError) as e:
        raise ConfigError(str(e), field=field_name)
    return specs


@dataclass
class DatasetConfig:
    kind: str = 'gaussian_mixture'
    n: int = 1000
    num_classes: int = 4
    noise: float = 0.5
    dim: int = 2
    images: typing.Optional[str] = None
    labels: typing.Optional[str] = None
    test_fraction: float = 0.2
    limit: typing.Optional[int] = None
    calibration_size: int = variables.DEFAULT_CALIBRATION_SIZE

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError('unknown dataset kind {!r}, expected one of {}'.format(
                self.kind, ', '.join(DATASET_KINDS)), field='dataset.kind')
        if self.kind == 'mnist_idx' and not (self.images and self.labels):
            raise ConfigError('mnist_idx needs both images and labels paths', field='dataset.images')
        if self.kind != 'mnist_idx' and self.n < 10 * self.num_classes:
            raise ConfigError('need at least 10 samples per class', field='dataset.n')
        if self.num_classes < 2:
            raise ConfigError('must be at least 2', field='dataset.num_classes')
        if self.noise < 0:
            raise ConfigError('must be non-negative', field='dataset.noise')
        if self.dim < 2:
            raise ConfigError('must be at least 2', field='dataset.dim')
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError('must be in [0, 1)', field='dataset.test_fraction')
        if self.calibration_size < 1:
            raise ConfigError('must be positive', field='dataset.calibration_size')

    def build(self, seed):
        """
        Returns:
            Dataset: The configured data; IDX paths relative to the working
            directory
        """
        if self.kind == 'mnist_idx':
            return load_mnist_idx(self.images, self.labels, self.test_fraction, seed,
                                  self.calibration_size, self.limit)
        return make_synthetic(self.kind, self.n, self.num_classes, self.noise, seed, dim=self.dim,
                              test_fraction=self.test_fraction, calibration_size=self.calibration_size)


@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 32
    schedule: str = 'constant'
    warmup_steps: int = 0
    init_checkpoint: typing.Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError('must be non-negative', field='training.epochs')
        if self.batch_size < 1:
            raise ConfigError('must be positive', field='training.batch_size')
        if self.schedule not in SCHEDULES:
            raise ConfigError('unknown schedule {!r}, expected one of {}'.format(
                self.schedule, ', '.join(SCHEDULES)), field='training.schedule')
        if self.warmup_steps < 0:
            raise ConfigError('must be non-negative', field='training.warmup_steps')


@dataclass
class SweepConfig:
    specs: str = 'topk_global:0.5,0.7,0.9'
    trials: int = 10
    calibration_size: int = variables.DEFAULT_CALIBRATION_SIZE
    bnt_batches: int = variables.DEFAULT_BNT_BATCHES
    bnt_batch_size: int = variables.DEFAULT_BNT_BATCH_SIZE

    def __post_init__(self):
        parse_specs(self.specs, 'sweep.specs')
        if self.trials < 1:
            raise ConfigError('must be at least 1', field='sweep.trials')
        if self.calibration_size < 1:
            raise ConfigError('must be positive', field='sweep.calibration_size')
        if self.bnt_batches < 0:
            raise ConfigError('must be non-negative', field='sweep.bnt_batches')
        if self.bnt_batch_size < 1:
            raise ConfigError('must be positive', field='sweep.bnt_batch_size')


@dataclass
class OutputConfig:
    checkpoint: typing.Optional[str] = None
    training_log: typing.Optional[str] = None
    report: typing.Optional[str] = None


def _accepts(annotation, value):
    if value is None:
        return type(None) in typing.get_args(annotation)
    options = typing.get_args(annotation) or (annotation,)
    for option in options:
        if option is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return True
        if option is int and isinstance(value, int) and not isinstance(value, bool):
            return True
        if option in (str, bool, list, dict) and isinstance(value, option):
            return True
    return False


def _section(cls, data, name, convert=None):
    """
    Builds dataclass ``cls`` from ``data``, rejecting unknown keys and values
    of the wrong type before the dataclass validates ranges.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError('expected an object', field=name)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError('unknown key {!r}'.format(unknown[0]), field='{}.{}'.format(name, unknown[0]))
    hints = typing.get_type_hints(cls)
    values = {}
    for key, value in data.items():
        if convert and key in convert:
            value = convert[key](value)
        elif not _accepts(hints[key], value):
            raise ConfigError('expected {}, got {!r}'.format(
                getattr(hints[key], '__name__', hints[key]), value), field='{}.{}'.format(name, key))
        values[key] = value
    missing = [f.name for f in known.values()
               if f.default is MISSING and f.default_factory is MISSING and f.name not in values]
    if missing:
        raise ConfigError('missing required key', field='{}.{}'.format(name, missing[0]))
    return cls(**values)


def _trailing_dims(model, respect_prunable_flags=True):
    """
    Trailing widths of the tensors an operator will see for ``model``.
    Dense weights are stored ``(fan_out, fan_in)``.
    """
    widths = model.layer_widths
    last = len(widths) - 2
    dims = []
    for i, fan_in in enumerate(widths[:-1]):
        if respect_prunable_flags:
            if (i == 0 and not model.prune_first_layer) or (i == last and not model.prune_last_layer):
                continue
        dims.append(fan_in)
    if not respect_prunable_flags:
        dims.extend(widths[1:])
    return dims


@dataclass
class RunConfig:
    """
    Complete experiment description.
    """

    model: ModelConfig
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0
    path: typing.Optional[str] = None

    @classmethod
    def from_dict(cls, data, path=None):
        """
        Validates ``data`` completely.

        Raises:
            ConfigError: Naming the dotted field and the config ``path``
        """
        try:
            if not isinstance(data, dict):
                raise ConfigError('top level must be an object')
            unknown = sorted(set(data) - {'dataset', 'model', 'optimizer', 'training', 'sweep', 'output', 'seed'})
            if unknown:
                raise ConfigError('unknown key {!r}'.format(unknown[0]), field=unknown[0])
            seed = data.get('seed', 0)
            if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
                raise ConfigError('must be a non-negative integer', field='seed')
            if 'model' not in data:
                raise ConfigError('missing required section', field='model')
            config = cls(
                model=_section(ModelConfig, data['model'], 'model'),
                dataset=_section(DatasetConfig, data.get('dataset'), 'dataset'),
                optimizer=_section(OptimizerConfig, data.get('optimizer'), 'optimizer', convert={
                    'operator_set': lambda v: parse_specs(v, 'optimizer.operator_set'),
                }),
                training=_section(TrainingConfig, data.get('training'), 'training'),
                sweep=_section(SweepConfig, data.get('sweep'), 'sweep'),
                output=_section(OutputConfig, data.get('output'), 'output'),
                seed=seed,
                path=path,
            )
            config._check_shapes()
        except ConfigError as e:
            if path and not e.path:
                raise ConfigError(e.message, field=e.field, path=path) from e
            raise
        return config

    @classmethod
    def load(cls, path):
        """
        Reads and validates a JSON config file.
        """
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError('cannot read config: {}'.format(e.strerror), path=path)
        except json.JSONDecodeError as e:
            raise ConfigError('invalid JSON at line {} column {}: {}'.format(e.lineno, e.colno, e.msg), path=path)
        return cls.from_dict(data, path=os.path.abspath(path))

    def _check_shapes(self):
        widths = self.model.layer_widths
        if self.dataset.kind != 'mnist_idx':
            if widths[0] != self.dataset.dim:
                raise ConfigError('input width {} does not match dataset dim {}'.format(
                    widths[0], self.dataset.dim), field='model.layer_widths')
            if widths[-1] != self.dataset.num_classes:
                raise ConfigError('output width {} does not match {} classes'.format(
                    widths[-1], self.dataset.num_classes), field='model.layer_widths')
        for field_name, specs in (('optimizer.operator_set', self.optimizer.operator_set),
                                  ('sweep.specs', self.sweep_specs)):
            for spec in specs:
                if spec.kind != 'n_m':
                    continue
                for dim in _trailing_dims(self.model, spec.respect_prunable_flags):
                    if dim % spec.m:
                        raise ConfigError('{} needs widths divisible by {}, got a tensor of width {}'.format(
                            spec.label, spec.m, dim), field=field_name)

    def build_dataset(self):
        return self.dataset.build(self.seed)

    @property
    def sweep_specs(self):
        return parse_specs(self.sweep.specs, 'sweep.specs')

    def to_dict(self):
        return {
            'seed': self.seed,
            'dataset': dict(self.dataset.__dict__),
            'model': self.model.to_dict(),
            'optimizer': self.optimizer.to_dict(),
            'training': dict(self.training.__dict__),
            'sweep': dict(self.sweep.__dict__),
            'output': dict(self.output.__dict__),
        }
