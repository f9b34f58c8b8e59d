import json

import pytest

from cramkit.compression import CompressionSpec
from cramkit.config import RunConfig, parse_specs
from cramkit.errors import ConfigError


def base():
    return {
        'seed': 3,
        'dataset': {'kind': 'gaussian_mixture', 'n': 200, 'num_classes': 4, 'noise': 0.3},
        'model': {'layer_widths': [2, 8, 4]},
        'optimizer': {'algorithm': 'cram_plus', 'learning_rate': 0.05, 'rho': 0.05,
                      'operator_set': ['topk_global:0.5,0.7']},
        'training': {'epochs': 2, 'batch_size': 16, 'schedule': 'cosine'},
    }


def field_of(data):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(data)
    return info.value.field


def test_full_config_parses():
    config = RunConfig.from_dict(base())
    assert config.seed == 3
    assert config.optimizer.operator_set == [CompressionSpec.top_k_global(0.5), CompressionSpec.top_k_global(0.7)]
    assert config.training.schedule == 'cosine'
    assert config.sweep.trials == 10
    assert [s.label for s in config.sweep_specs] == ['topk_global:0.5', 'topk_global:0.7', 'topk_global:0.9']


def test_round_trips_through_to_dict():
    config = RunConfig.from_dict(base())
    assert RunConfig.from_dict(json.loads(json.dumps(config.to_dict()))).to_dict() == config.to_dict()


def test_unknown_keys_are_named():
    data = base()
    data['training']['epoch'] = 3
    assert field_of(data) == 'training.epoch'
    data = base()
    data['extra'] = 1
    assert field_of(data) == 'extra'


def test_wrong_types_are_named():
    data = base()
    data['training']['batch_size'] = '16'
    assert field_of(data) == 'training.batch_size'
    data = base()
    data['model']['use_batchnorm'] = 1
    assert field_of(data) == 'model.use_batchnorm'


def test_range_errors_are_named():
    data = base()
    data['optimizer']['momentum'] = 1.0
    assert field_of(data) == 'optimizer.momentum'
    data = base()
    data['sweep'] = {'trials': 0}
    assert field_of(data) == 'sweep.trials'
    data = base()
    data['optimizer']['operator_set'] = ['topk_global:1.5']
    assert field_of(data) == 'optimizer.operator_set'


def test_model_must_match_the_dataset():
    data = base()
    data['model']['layer_widths'] = [3, 8, 4]
    assert field_of(data) == 'model.layer_widths'
    data = base()
    data['model']['layer_widths'] = [2, 8, 5]
    assert field_of(data) == 'model.layer_widths'


def test_missing_model_section():
    data = base()
    del data['model']
    assert field_of(data) == 'model'


def test_mnist_needs_paths():
    data = base()
    data['dataset'] = {'kind': 'mnist_idx'}
    assert field_of(data) == 'dataset.images'


def test_load_reports_the_path(tmp_path):
    path = tmp_path / 'run.json'
    data = base()
    data['seed'] = -1
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigError) as info:
        RunConfig.load(str(path))
    assert info.value.field == 'seed'
    assert str(path) in str(info.value)


def test_load_rejects_bad_json(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"seed": ')
    with pytest.raises(ConfigError, match='invalid JSON'):
        RunConfig.load(str(path))
    with pytest.raises(ConfigError, match='cannot read'):
        RunConfig.load(str(tmp_path / 'absent.json'))


def test_build_dataset_uses_the_seed():
    config = RunConfig.from_dict(base())
    assert config.build_dataset().fingerprint() == config.build_dataset().fingerprint()
    other = base()
    other['seed'] = 4
    assert RunConfig.from_dict(other).build_dataset().fingerprint() != config.build_dataset().fingerprint()


def test_parse_specs_forms():
    assert parse_specs('nm:2:4', 'x') == [CompressionSpec.n_m(2, 4)]
    assert parse_specs([{'kind': 'quantize_symmetric', 'bits': 4}], 'x') == [CompressionSpec.quantize(4)]
    with pytest.raises(ConfigError):
        parse_specs(5, 'x')
    with pytest.raises(ConfigError):
        parse_specs([{'kind': 'top_k_global', 'density': 0.5}], 'x')


def test_n_m_must_divide_every_pruned_width():
    data = base()
    data['model']['layer_widths'] = [2, 8, 8, 4]
    data['optimizer']['operator_set'] = 'nm:2:4'
    assert field_of(data) == 'optimizer.operator_set'
    data['model']['prune_first_layer'] = False
    assert RunConfig.from_dict(data).optimizer.operator_set == [CompressionSpec.n_m(2, 4)]


def test_n_m_sweep_specs_are_checked():
    data = base()
    data['sweep'] = {'specs': 'nm:2:4'}
    assert field_of(data) == 'sweep.specs'
