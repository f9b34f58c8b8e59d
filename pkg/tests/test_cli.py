import json

import numpy as np
import pytest

from cramkit import logger
from cramkit import tensor as tensor_module
from cramkit.checkpoint import load_checkpoint
from cramkit.cli import build_parser, main


def write_config(tmp_path, **overrides):
    data = {
        'seed': 0,
        'dataset': {'kind': 'gaussian_mixture', 'n': 200, 'num_classes': 4, 'noise': 0.3, 'calibration_size': 40},
        'model': {'layer_widths': [2, 8, 4]},
        'optimizer': {'algorithm': 'cram', 'learning_rate': 0.05, 'rho': 0.05, 'operator_set': 'topk_global:0.5'},
        'training': {'epochs': 2, 'batch_size': 16},
        'sweep': {'trials': 2, 'calibration_size': 20, 'bnt_batches': 4, 'bnt_batch_size': 8},
    }
    for section, values in overrides.items():
        data[section] = dict(data.get(section, {}), **values)
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def trained_path(tmp_path):
    out = str(tmp_path / 'model.cram')
    assert main(['train', write_config(tmp_path), '--out', out]) == 0
    return out


def test_train_writes_checkpoint_and_log(tmp_path, capsys, trained_path):
    checkpoint = load_checkpoint(trained_path)
    assert checkpoint.metadata['algorithm'] == 'cram'
    assert checkpoint.metadata['config_path'].endswith('run.json')
    with open(trained_path + '.log.json') as f:
        log = json.load(f)
    assert len(log['epochs']) == 2
    assert log['passes'] == 40
    assert 'checkpoint:' in capsys.readouterr().out


def test_train_config_error_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, optimizer={'algorithm': 'cram', 'momentum': 2.0})
    assert main(['train', path, '--out', str(tmp_path / 'x.cram')]) == 2
    assert 'optimizer.momentum' in capsys.readouterr().err
    assert logger.get_logs('error')[0]['data']['exit_code'] == 2


def test_train_without_output_path_exits_2(tmp_path):
    assert main(['train', write_config(tmp_path)]) == 2


def test_train_missing_idx_exits_4(tmp_path):
    path = write_config(tmp_path, dataset={'kind': 'mnist_idx', 'images': str(tmp_path / 'nope-images'),
                                           'labels': str(tmp_path / 'nope-labels')},
                        model={'layer_widths': [784, 8, 10]})
    assert main(['train', path, '--out', str(tmp_path / 'x.cram')]) == 4


def test_train_divergence_exits_3(tmp_path):
    path = write_config(tmp_path, optimizer={'algorithm': 'sgd', 'learning_rate': 1e300, 'operator_set': []},
                        model={'layer_widths': [2, 8, 4], 'use_batchnorm': False})
    out = str(tmp_path / 'x.cram')
    assert main(['train', path, '--out', out]) == 3
    with open(out + '.log.json') as f:
        assert json.load(f)['aborted_steps'] > 0


def test_sweep_writes_report(tmp_path, trained_path, capsys):
    report_path = str(tmp_path / 'report.json')
    code = main(['sweep', trained_path, '--specs', 'topk_global:0.5,0.7', '--trials', '2', '--out', report_path])
    assert code == 0
    with open(report_path) as f:
        report = json.load(f)
    assert [p['spec'] for p in report['points']] == ['topk_global:0.5', 'topk_global:0.7']
    assert len(report['points'][0]['trials']) == 2
    assert 'dense accuracy' in capsys.readouterr().out


def test_sweep_is_reproducible(tmp_path, trained_path):
    first, second = str(tmp_path / 'a.json'), str(tmp_path / 'b.json')
    for out in (first, second):
        assert main(['sweep', trained_path, '--specs', 'topk_global:0.7', '--out', out]) == 0
    with open(first) as a, open(second) as b:
        assert a.read() == b.read()


def test_sweep_bad_spec_exits_2(tmp_path, trained_path):
    assert main(['sweep', trained_path, '--specs', 'prune:0.5', '--out', str(tmp_path / 'r.json')]) == 2


def test_sweep_corrupt_checkpoint_exits_4(tmp_path):
    path = tmp_path / 'bad.cram'
    path.write_bytes(b'NOPE')
    assert main(['sweep', str(path), '--specs', 'topk_global:0.5', '--out', str(tmp_path / 'r.json')]) == 4


def test_gradcheck_passes(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(['gradcheck', path, '--seeds', '1', '--max-coords', '4']) == 0
    assert 'max relative error' in capsys.readouterr().out


def test_gradcheck_impossible_tolerance_exits_5(tmp_path):
    path = write_config(tmp_path)
    assert main(['gradcheck', path, '--seeds', '1', '--max-coords', '4', '--tolerance', '0']) == 5


def test_danskin_passes():
    assert main(['danskin', '--points', '4', '--grid', '21']) == 0


def test_danskin_bad_dimension_exits_2():
    assert main(['danskin', '--dim', '5']) == 2


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_train_n_m_on_narrow_layer_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, model={'layer_widths': [2, 8, 8, 4]},
                        optimizer={'algorithm': 'cram', 'operator_set': 'nm:2:4'})
    assert main(['train', path, '--out', str(tmp_path / 'x.cram')]) == 2
    assert 'optimizer.operator_set' in capsys.readouterr().err


def test_gradcheck_catches_a_wrong_backward_rule(tmp_path, monkeypatch):
    def relu_with_doubled_slope(inputs, attrs):
        (x,) = inputs
        active = x.data > 0.0
        return np.where(active, x.data, 0.0), lambda g: [np.where(active, 2.0 * g, 0.0)]
    monkeypatch.setitem(tensor_module._FORWARD, 'relu', relu_with_doubled_slope)
    path = write_config(tmp_path)
    assert main(['gradcheck', path, '--seeds', '1']) == 5
    assert logger.get_logs('error')[0]['data']['exit_code'] == 5
