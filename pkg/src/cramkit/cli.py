"""
Command-line front end.

Exit codes: 0 success, 2 configuration, 3 divergence, 4 I/O, 5 failed
verification. Errors go to standard error.
"""
import argparse
import sys

import numpy as np

from cramkit import logger, variables
from cramkit.checkpoint import atomic_write, load_checkpoint, save_checkpoint
from cramkit.compression import parse_spec_list
from cramkit.config import RunConfig
from cramkit.danskin import analytic_zoo, danskin_descent_check
from cramkit.errors import (
    ConfigError,
    ContractError,
    DeterminismError,
    FormatError,
    InputError,
    ShapeError,
    TrainingDivergedError,
)
from cramkit.gradcheck import grad_check
from cramkit.harness import sweep, train
from cramkit.model import MLP, BatchObjective

__all__ = ['cmd_train', 'cmd_sweep', 'cmd_gradcheck', 'cmd_danskin', 'build_parser', 'main']

GRADCHECK_BATCH = 8


def _fail(code, error, context=None):
    if context is None or getattr(error, 'path', None):
        message = str(error)
    else:
        message = '{}: {}'.format(context, error)
    logger.log_event('error', {'exit_code': code, 'message': message})
    print('error: {}'.format(message), file=sys.stderr)
    return code


def add_line(lines, line=''):
    print(line)
    lines.append(line)


def cmd_train(config_path, out=None, log_path=None):
    """
    Trains the configured model and writes the checkpoint and its training
    log (``<checkpoint>.log.json`` unless given).

    Returns:
        int: Exit code
    """
    try:
        config = RunConfig.load(config_path)
        out = out or config.output.checkpoint
        if not out:
            raise ConfigError('no checkpoint path: pass --out or set it', field='output.checkpoint', path=config_path)
        dataset = config.build_dataset()
        init = None
        if config.training.init_checkpoint:
            init = load_checkpoint(config.training.init_checkpoint)
        checkpoint, log = train(
            config.model, config.optimizer, dataset,
            epochs=config.training.epochs,
            batch_size=config.training.batch_size,
            schedule=config.training.schedule,
            seed=config.seed,
            warmup_steps=config.training.warmup_steps,
            init_checkpoint=init,
        )
    except (ConfigError, ContractError, ShapeError) as e:
        return _fail(variables.EXIT_CONFIG, e, config_path)
    except TrainingDivergedError as e:
        if e.log is not None and out:
            atomic_write(log_path or config.output.training_log or out + '.log.json', e.log.to_json())
        return _fail(variables.EXIT_DIVERGED, e, config_path)
    except (FormatError, InputError, OSError) as e:
        return _fail(variables.EXIT_IO, e, config_path)
    checkpoint.metadata['config_path'] = config.path
    log_path = log_path or config.output.training_log or out + '.log.json'
    try:
        save_checkpoint(checkpoint, out)
        atomic_write(log_path, log.to_json())
    except OSError as e:
        return _fail(variables.EXIT_IO, e, out)
    last = log.epochs[-1] if log.epochs else {}
    print('trained {} for {} epochs ({} passes), train accuracy {}'.format(
        config.optimizer.algorithm, config.training.epochs, log.passes,
        '{:.4f}'.format(last['train_accuracy']) if last else 'n/a'))
    print('checkpoint: {}'.format(out))
    print('training log: {}'.format(log_path))
    return variables.EXIT_OK


def _print_sweep(report):
    lines = []
    add_line(lines, 'dense accuracy: {:.4f}'.format(report.dense_accuracy))
    add_line(lines, '{:<24} {:>10} {:>9} {:>20}'.format('spec', 'sparsity', 'pre-BNT', 'post-BNT'))
    add_line(lines, '-' * 66)
    for point in report.points:
        post = '{:.4f} +- {:.4f}'.format(point.post_bnt_mean, point.post_bnt_std)
        add_line(lines, '{:<24} {:>10} {:>9.4f} {:>20}'.format(point.spec, str(point.sparsity), point.pre_bnt, post))
    return lines


def cmd_sweep(checkpoint_path, specs, trials, out, config_path=None, calibration_size=None,
              bnt_batches=None, bnt_batch_size=None, seed=None):
    """
    One-shot sweep of a trained checkpoint, written as a JSON report.

    The dataset comes from ``config_path`` or the config recorded in the
    checkpoint.

    Returns:
        int: Exit code
    """
    try:
        spec_list = parse_spec_list(specs)
    except (ContractError, ValueError) as e:
        return _fail(variables.EXIT_CONFIG, e, '--specs')
    try:
        checkpoint = load_checkpoint(checkpoint_path)
    except (FormatError, OSError) as e:
        return _fail(variables.EXIT_IO, e, checkpoint_path)
    config_path = config_path or checkpoint.metadata.get('config_path')
    if not config_path:
        return _fail(variables.EXIT_CONFIG, 'checkpoint records no config, pass --config', checkpoint_path)
    try:
        config = RunConfig.load(config_path)
        dataset = config.build_dataset()
        report = sweep(
            checkpoint, dataset, spec_list,
            trials=trials if trials is not None else config.sweep.trials,
            calibration_size=calibration_size or config.sweep.calibration_size,
            seed=config.seed if seed is None else seed,
            num_batches=config.sweep.bnt_batches if bnt_batches is None else bnt_batches,
            batch_size=bnt_batch_size or config.sweep.bnt_batch_size,
        )
    except (ConfigError, ContractError, ShapeError) as e:
        return _fail(variables.EXIT_CONFIG, e, config_path)
    except (FormatError, InputError, OSError) as e:
        return _fail(variables.EXIT_IO, e, config_path)
    try:
        atomic_write(out, report.to_json())
    except OSError as e:
        return _fail(variables.EXIT_IO, e, out)
    _print_sweep(report)
    print('report: {}'.format(out))
    return variables.EXIT_OK


def cmd_gradcheck(config_path, tolerance=1e-5, epsilon=1e-5, max_coords=None, seeds=3):
    """
    Finite-difference check of the configured model's gradients at fresh
    initializations, one per seed.

    Returns:
        int: 0 when every seed stays under ``tolerance``, 5 otherwise
    """
    try:
        config = RunConfig.load(config_path)
        dataset = config.build_dataset()
    except (ConfigError, ContractError) as e:
        return _fail(variables.EXIT_CONFIG, e, config_path)
    except (FormatError, InputError, OSError) as e:
        return _fail(variables.EXIT_IO, e, config_path)
    features, labels = dataset.arrays('train')
    worst = (None, 0.0)
    for seed in range(seeds):
        model = MLP(config.model, seed=config.seed + seed)
        objective = BatchObjective(model, features[:GRADCHECK_BATCH], labels[:GRADCHECK_BATCH])
        try:
            report = grad_check(objective, model.params, epsilon=epsilon, tolerance=tolerance,
                                max_coords=max_coords, rng=np.random.default_rng(seed))
        except DeterminismError as e:
            return _fail(variables.EXIT_VERIFICATION, e, config_path)
        name, error = report.worst
        print('seed {}: max relative error {:.3e} ({}), {} coordinates, {} kinks and {} unresolved skipped'.format(
            config.seed + seed, error, name, report.checked, len(report.flagged), len(report.unresolved)))
        if error >= worst[1]:
            worst = (name, error)
    print('max relative error: {:.3e}'.format(worst[1]))
    if worst[1] > tolerance:
        return _fail(variables.EXIT_VERIFICATION, 'gradient check failed: {} has relative error {:.3e} > {:g}'.format(
            worst[0], worst[1], tolerance))
    return variables.EXIT_OK


def cmd_danskin(dim=2, rho=variables.DEFAULT_RHO, grid=41, spec='topk_global:0.5', points=10, seed=0):
    """
    Descent check of the compressed-perturbation direction on the analytic
    objectives.

    Returns:
        int: 5 when any non-articulation point fails to descend
    """
    try:
        specs = parse_spec_list(spec)
        if len(specs) != 1:
            raise ContractError('--spec takes a single operator, got {}'.format(len(specs)))
        rng = np.random.default_rng(seed)
        candidates = rng.normal(size=(points, dim))
        reports = [(objective, danskin_descent_check(objective, specs[0], rho, grid, candidates))
                   for objective in analytic_zoo(dim, seed)]
    except (ContractError, ShapeError, ValueError) as e:
        return _fail(variables.EXIT_CONFIG, e, 'danskin')
    failed = False
    for objective, report in reports:
        excluded = len(report.articulation_points)
        status = 'pass' if report.passed else 'FAIL'
        print('{:<24} {} ({} points, {} articulation points excluded{})'.format(
            objective.name, status, len(report.results), excluded, ', coarse grid' if report.coarse else ''))
        for violation in report.violations:
            print('  violation at {}: worst-case change {:+.3e}'.format(violation.point, violation.change))
        failed = failed or not report.passed
    if failed:
        return _fail(variables.EXIT_VERIFICATION, 'descent violated at non-articulation points')
    return variables.EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog='cramkit', description='Compression-aware training toolkit.')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('train', help='train a model from a JSON config')
    p.add_argument('config', help='experiment config (JSON)')
    p.add_argument('--out', help='checkpoint path (defaults to output.checkpoint)')
    p.add_argument('--log', help='training log path (defaults to <checkpoint>.log.json)')

    p = commands.add_parser('sweep', help='one-shot compression sweep with batch-norm tuning')
    p.add_argument('checkpoint', help='trained checkpoint')
    p.add_argument('--specs', required=True, help='spec list, e.g. topk_global:0.5,0.7,0.9 or nm:2:4 or quant:4')
    p.add_argument('--trials', type=int, default=None, help='calibration trials per spec')
    p.add_argument('--out', required=True, help='report path (JSON)')
    p.add_argument('--config', help='config to load the dataset from (defaults to the one used for training)')
    p.add_argument('--calibration-size', type=int, default=None, help='samples per calibration set')
    p.add_argument('--bnt-batches', type=int, default=None, help='forward passes per tuning')
    p.add_argument('--bnt-batch-size', type=int, default=None, help='samples per tuning pass')
    p.add_argument('--seed', type=int, default=None, help='master seed (defaults to the config seed)')

    p = commands.add_parser('gradcheck', help='finite-difference check of model gradients')
    p.add_argument('config', help='experiment config (JSON)')
    p.add_argument('--tolerance', type=float, default=1e-5, help='max relative error')
    p.add_argument('--epsilon', type=float, default=1e-5, help='finite-difference step')
    p.add_argument('--max-coords', type=int, default=None, help='coordinates checked per parameter')
    p.add_argument('--seeds', type=int, default=3, help='initializations to check')

    p = commands.add_parser('danskin', help='descent check on analytic objectives')
    p.add_argument('--dim', type=int, default=2, help='dimension, at most 4')
    p.add_argument('--rho', type=float, default=variables.DEFAULT_RHO, help='perturbation radius')
    p.add_argument('--grid', type=int, default=41, help='grid points per axis')
    p.add_argument('--spec', default='topk_global:0.5', help='mask-inducing operator')
    p.add_argument('--points', type=int, default=10, help='random points per objective')
    p.add_argument('--seed', type=int, default=0, help='seed for points and objectives')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == 'train':
        return cmd_train(args.config, args.out, args.log)
    if args.command == 'sweep':
        return cmd_sweep(args.checkpoint, args.specs, args.trials, args.out, args.config,
                         args.calibration_size, args.bnt_batches, args.bnt_batch_size, args.seed)
    if args.command == 'gradcheck':
        return cmd_gradcheck(args.config, args.tolerance, args.epsilon, args.max_coords, args.seeds)
    return cmd_danskin(args.dim, args.rho, args.grid, args.spec, args.points, args.seed)


if __name__ == '__main__':
    sys.exit(main())
