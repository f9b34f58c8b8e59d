"""
Experiment engine: training loop, one-shot compression, batch-norm tuning
and one-shot sparsity sweeps.
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from cramkit import logger, settings, variables
from cramkit.checkpoint import Checkpoint
from cramkit.compression import achieved_sparsity, compress
from cramkit.errors import ContractError, NumericDomainError, TrainingDivergedError
from cramkit.model import MLP, BatchObjective, BNMode, evaluate, loss
from cramkit.optimizers import Optimizer
from cramkit.tensor import Tape

__all__ = [
    'SCHEDULES',
    'learning_rate_at',
    'TrainingLog',
    'SweepPoint',
    'SweepReport',
    'train',
    'one_shot_compress',
    'bnt',
    'sweep',
    'mask_stability_report',
]

SCHEDULES = ('constant', 'cosine', 'linear_warmup')
DIVERGENCE_SHARE = 0.5


def learning_rate_at(schedule, base_lr, step, total_steps, warmup_steps=0):
    """
    Learning rate for ``step`` (0-based) out of ``total_steps``.

    ``cosine`` decays from ``base_lr`` towards 0; ``linear_warmup`` ramps up
    linearly over ``warmup_steps`` and then follows the cosine decay over the
    remaining steps.
    """
    if schedule not in SCHEDULES:
        raise ContractError('unknown schedule {!r}'.format(schedule))
    if schedule == 'constant' or total_steps <= 0:
        return base_lr
    if schedule == 'linear_warmup':
        if step < warmup_steps:
            return base_lr * (step + 1) / warmup_steps
        step -= warmup_steps
        total_steps -= warmup_steps
        if total_steps <= 0:
            return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainingLog:
    """
    What a training run did, epoch by epoch.
    """

    epochs: list = field(default_factory=list)
    mask_diff_log: list = field(default_factory=list)
    step_kinds: dict = field(default_factory=dict)
    passes: int = 0
    steps: int = 0
    aborted_steps: int = 0

    def to_dict(self):
        return {
            'epochs': self.epochs,
            'mask_diff_log': [
                {'step': d.step, 'fraction': float(d.fraction), 'spec': d.spec} for d in self.mask_diff_log
            ],
            'mask_stability': mask_stability_report(self),
            'step_kinds': dict(self.step_kinds),
            'passes': self.passes,
            'steps': self.steps,
            'aborted_steps': self.aborted_steps,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _dataset_loss(model, features, labels, batch_size=1024):
    total = 0.0
    with Tape(frozen=True):
        for start in range(0, len(labels), batch_size):
            logits = model.forward(features[start:start + batch_size], mode='eval')
            batch = loss(logits, labels[start:start + batch_size], model.config.label_smoothing)
            total += batch.item() * len(labels[start:start + batch_size])
    return total / len(labels)


def train(model_config, optimizer_config, dataset, epochs, batch_size, schedule='constant',
          seed=0, warmup_steps=0, init_checkpoint=None):
    """
    Trains an MLP with the configured optimizer.

    Each epoch visits the train split in an order drawn from a generator
    seeded with ``(seed, epoch)``. Batch-norm statistics follow the dense
    passes only.

    Args:
        model_config (ModelConfig): Architecture
        optimizer_config (OptimizerConfig): Algorithm and hyperparameters
        dataset (Dataset): Data with a non-empty train split
        epochs (int): Number of passes over the train split
        batch_size (int): Mini-batch size
        schedule (str): Learning-rate schedule, one of :data:`SCHEDULES`
        seed (int): Initialization and data-order seed
        warmup_steps (int): Warmup length for ``linear_warmup``
        init_checkpoint (Checkpoint, optional): Start from these parameters
            and statistics instead of a fresh initialization

    Raises:
        TrainingDivergedError: More than half the steps of an epoch aborted

    Returns:
        tuple: ``(Checkpoint, TrainingLog)``
    """
    features, labels = dataset.arrays('train')
    if len(labels) == 0:
        raise ContractError('dataset has an empty train split')
    if epochs < 0 or batch_size < 1:
        raise ContractError('epochs must be >= 0 and batch_size >= 1')
    if init_checkpoint is not None:
        model = init_checkpoint.model()
    else:
        model = MLP(model_config, seed=seed)
    model.bn_state.mode = BNMode.TRAIN_TRACKING
    optimizer = Optimizer(optimizer_config)
    log = TrainingLog()
    steps_per_epoch = int(math.ceil(len(labels) / batch_size))
    total_steps = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(labels))
        aborted_before = optimizer.state.aborted_steps
        lr = optimizer_config.learning_rate
        for start in range(0, len(labels), batch_size):
            idx = order[start:start + batch_size]
            lr = learning_rate_at(schedule, optimizer_config.learning_rate, step, total_steps, warmup_steps)
            objective = BatchObjective(model, features[idx], labels[idx])
            model.params, _ = optimizer.step(objective, model.params, lr)
            log.passes += objective.passes
            step += 1
        aborted = optimizer.state.aborted_steps - aborted_before
        _sync(log, optimizer, step)
        if aborted > DIVERGENCE_SHARE * steps_per_epoch:
            raise _diverged(log, epoch, aborted, steps_per_epoch)
        try:
            summary = {
                'epoch': epoch,
                'learning_rate': lr,
                'aborted_steps': aborted,
                'loss': _dataset_loss(model, features, labels),
                'train_accuracy': evaluate(model, dataset, 'train'),
                'test_accuracy': evaluate(model, dataset, 'test') if dataset.size('test') else None,
            }
        except NumericDomainError:
            raise _diverged(log, epoch, aborted, steps_per_epoch)
        log.epochs.append(summary)
        logger.log_event('train', dict(summary, algorithm=optimizer_config.algorithm))
    _sync(log, optimizer, step)
    checkpoint = Checkpoint.from_model(model, optimizer_config, {
        'seed': seed,
        'step': step,
        'epochs': epochs,
        'schedule': schedule,
        'algorithm': optimizer_config.algorithm,
        'dataset_fingerprint': dataset.fingerprint(),
        'passes': log.passes,
        'mask_stability': mask_stability_report(log),
    })
    return checkpoint, log


def _sync(log, optimizer, step):
    log.steps = step
    log.aborted_steps = optimizer.state.aborted_steps
    log.mask_diff_log = list(optimizer.state.mask_diff_log)
    log.step_kinds = dict(optimizer.state.step_kinds)


def _diverged(log, epoch, aborted, steps_per_epoch):
    message = 'training diverged in epoch {}: {} of {} steps aborted'.format(epoch, aborted, steps_per_epoch)
    logger.log_event('error', {'message': message})
    return TrainingDivergedError(message, log)


def one_shot_compress(checkpoint, spec):
    """
    Compresses the parameters once; statistics are copied unchanged.

    Returns:
        Checkpoint: Compressed checkpoint recording ``spec`` and the
        achieved sparsity in its metadata
    """
    params, _ = compress(checkpoint.params, spec)
    return checkpoint.replace(params=params, metadata={
        'compression': spec.to_dict(),
        'achieved_sparsity': achieved_sparsity(params, spec.respect_prunable_flags),
    })


def _calibration_features(calibration):
    if isinstance(calibration, tuple):
        calibration = calibration[0]
    return np.asarray(calibration, dtype=np.float64)


def bnt(checkpoint, calibration, num_batches=variables.DEFAULT_BNT_BATCHES,
        batch_size=variables.DEFAULT_BNT_BATCH_SIZE, rng=None):
    """
    Batch-norm tuning: resets the running statistics to the (0, 1) prior
    and re-estimates them from ``num_batches`` forward passes over the
    calibration samples. Parameters are never touched.

    Args:
        checkpoint (Checkpoint): Usually a compressed checkpoint
        calibration: Feature array or ``(features, labels)`` tuple
        num_batches (int): Forward passes; 0 only resets the statistics
        batch_size (int): Samples per pass, cycling through the calibration
            set in shuffled order
        rng (numpy.random.Generator, optional): Batch order

    Returns:
        Checkpoint: Same parameters with re-estimated statistics
    """
    model = checkpoint.model()
    if not model.has_batchnorm:
        logger.log_event('bnt', {'warning': 'model has no batch-norm layers, nothing to tune'})
        return checkpoint.replace(metadata={'bnt': {'skipped': True}})
    features = _calibration_features(calibration)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ContractError('calibration set is empty')
    if num_batches < 0 or batch_size < 1:
        raise ContractError('num_batches must be >= 0 and batch_size >= 1')
    rng = rng if rng is not None else np.random.default_rng(0)
    needed = num_batches * batch_size
    laps = int(math.ceil(needed / features.shape[0]))
    order = np.concatenate([rng.permutation(features.shape[0]) for _ in range(laps)]) if laps else []
    state = model.bn_state
    state.reset()
    state.mode = BNMode.TUNING
    with Tape(frozen=True):
        for b in range(num_batches):
            model.forward(features[order[b * batch_size:(b + 1) * batch_size]], mode='train')
    state.mode = BNMode.TRAIN_TRACKING
    return checkpoint.replace(bn_state=state, metadata={'bnt': {
        'num_batches': num_batches,
        'batch_size': batch_size,
        'reset_only': num_batches == 0,
    }})


@dataclass
class SweepPoint:
    spec: str
    sparsity: object
    pre_bnt: float
    post_bnt_mean: float
    post_bnt_std: float
    trials: list
    achieved_sparsity: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SweepReport:
    """
    One-shot compression results of one checkpoint.

    Attributes:
        dense_accuracy (float): Test accuracy before compression
        points (list): One :class:`SweepPoint` per spec, in input order
        mask_stability (dict): Summary of the training mask differences
        metadata (dict): Seed, trial count and calibration settings
    """

    dense_accuracy: float
    points: list = field(default_factory=list)
    mask_stability: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            'schema_version': variables.REPORT_SCHEMA_VERSION,
            'dense_accuracy': self.dense_accuracy,
            'points': [p.to_dict() for p in self.points],
            'mask_stability': self.mask_stability,
            'metadata': self.metadata,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _trial(compressed, dataset, calibration_size, num_batches, batch_size, seed, point, trial):
    rng = np.random.default_rng([seed, point, trial])
    idx = dataset.calibration_sample(calibration_size, rng)
    tuned = bnt(compressed, dataset.features[idx], num_batches, batch_size, rng)
    return evaluate(tuned.model(), dataset, 'test')


def sweep(checkpoint, dataset, specs, trials=10, calibration_size=variables.DEFAULT_CALIBRATION_SIZE,
          seed=0, num_batches=variables.DEFAULT_BNT_BATCHES, batch_size=variables.DEFAULT_BNT_BATCH_SIZE,
          threads=None):
    """
    One-shot compression sweep with repeated batch-norm tuning.

    For every spec: compress, score before tuning, then run ``trials``
    tunings on freshly drawn class-balanced calibration sets. Trials run
    in a thread pool; results are merged in (spec, trial) order so the
    report only depends on the inputs.

    Args:
        checkpoint (Checkpoint): Dense checkpoint
        dataset (Dataset): Source of test and calibration samples
        specs (list): CompressionSpec items
        trials (int): Tuning repetitions per spec, at least 1
        calibration_size (int): Samples per calibration set
        seed (int): Master seed
        threads (int, optional): Worker cap; ``CRAM_THREADS`` by default

    Returns:
        SweepReport: Accuracies per spec
    """
    if trials < 1:
        raise ContractError('need at least one calibration trial, got {}'.format(trials))
    if calibration_size > dataset.size('train'):
        raise ContractError('calibration size {} exceeds the {} train samples'.format(
            calibration_size, dataset.size('train')))
    dense = evaluate(checkpoint.model(), dataset, 'test')
    compressed = [one_shot_compress(checkpoint, spec) for spec in specs]
    workers = max(1, min(threads or settings.get_threads(), len(specs) * trials or 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pre = [pool.submit(evaluate, c.model(), dataset, 'test') for c in compressed]
        post = [
            [pool.submit(_trial, c, dataset, calibration_size, num_batches, batch_size, seed, i, r)
             for r in range(trials)]
            for i, c in enumerate(compressed)
        ]
        pre = [f.result() for f in pre]
        post = [[f.result() for f in futures] for futures in post]
    report = SweepReport(
        dense_accuracy=dense,
        mask_stability=checkpoint.metadata.get('mask_stability', {}),
        metadata={
            'seed': seed,
            'trials': trials,
            'calibration_size': calibration_size,
            'bnt_batches': num_batches,
            'bnt_batch_size': batch_size,
            'algorithm': checkpoint.metadata.get('algorithm'),
            'dataset_fingerprint': dataset.fingerprint(),
            'library_version': variables.LIBRARY_VERSION,
        },
    )
    for spec, c, before, after in zip(specs, compressed, pre, post):
        point = SweepPoint(
            spec=spec.label,
            sparsity=spec.target,
            pre_bnt=before,
            post_bnt_mean=float(np.mean(after)),
            post_bnt_std=float(np.std(after)),
            trials=after,
            achieved_sparsity=c.metadata['achieved_sparsity'],
        )
        report.points.append(point)
        logger.log_event('sweep', {
            'spec': point.spec, 'pre_bnt': point.pre_bnt,
            'post_bnt_mean': point.post_bnt_mean, 'post_bnt_std': point.post_bnt_std,
        })
    return report


def mask_stability_report(log):
    """
    Mean and max consecutive mask difference per spec.

    Args:
        log: A :class:`TrainingLog`, or a list of ``MaskDiff`` items,
            ``{'fraction', 'spec'}`` dicts or bare fractions

    Returns:
        dict: spec label -> ``{'mean', 'max', 'count'}``; empty for an
        empty log
    """
    entries = log.mask_diff_log if isinstance(log, TrainingLog) else log
    grouped = {}
    for entry in entries:
        if isinstance(entry, dict):
            spec, fraction = entry.get('spec', 'all'), entry['fraction']
        elif hasattr(entry, 'fraction'):
            spec, fraction = entry.spec, entry.fraction
        else:
            spec, fraction = 'all', entry
        grouped.setdefault(spec, []).append(float(fraction))
    return {
        spec: {'mean': float(np.mean(values)), 'max': float(np.max(values)), 'count': len(values)}
        for spec, values in sorted(grouped.items())
    }
