import json
import pathlib

import pandas as pd
import pytest

from bound_engine import TheoryParams
from workbench import (EXIT_CONFIG, EXIT_EPSILON, EXIT_OK, ConfigError, apply_flags, build_parser,
                       config_from_dict, load_config, parse_theory, run_cli)


def _write(tmp_path, doc, name='exp.json'):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding='utf-8')
    return str(path)


def _gradient_doc(**verify):
    return {
        'generator': {'name': 'gradient', 'params': {'eta': 0.5}},
        'verify': {'kmax': 2, 'gap': 1e-6, 'time_limit': 60, **verify},
        'baseline': {'samples': 20, 'seed': 1},
    }


def test_malformed_json_reports_position(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{\n  "verify": {"kmax": 3,,}\n}', encoding='utf-8')
    with pytest.raises(ConfigError) as ei:
        load_config(str(path))
    assert ei.value.line == 2
    assert ei.value.column > 0
    assert 'line 2' in str(ei.value)
    assert run_cli(['verify', '--config', str(path)]) == EXIT_CONFIG


def test_unknown_generator_and_keys():
    with pytest.raises(ConfigError):
        config_from_dict({'generator': 'simplex'}).build_family()
    with pytest.raises(ConfigError):
        config_from_dict({'generator': 'lasso', 'verify': {'kmax': 3, 'speed': 'fast'}})
    with pytest.raises(ConfigError):
        config_from_dict({}).build_family()


def test_algorithm_section_reaches_the_generator():
    cfg = config_from_dict({'generator': {'name': 'lasso', 'seed': 4, 'params': {'p': 3, 'n': 4}},
                            'algorithm': {'variant': 'fista', 'eta_rule': 'fixed(0.2)'}})
    fam = cfg.build_family()
    assert fam.layout.names == ['z', 'y']
    assert fam.data['eta'] == pytest.approx(0.2)


def test_parse_theory():
    assert parse_theory(None) is None
    assert parse_theory('none') is None
    tp = parse_theory('contractive:0.5')
    assert isinstance(tp, TheoryParams) and tp.beta == 0.5
    assert parse_theory('averaged:2:0.5').q_exp == 0.5
    for bad in ('contractive:1.5', 'contractive', 'averaged:x:1', 'magic:1'):
        with pytest.raises(ConfigError):
            parse_theory(bad)


def test_parse_theory_user_file(tmp_path):
    path = _write(tmp_path, [1.0, 0.5, 0.25], 'alphas.json')
    tp = parse_theory('user:' + path)
    assert tp.mode == 'user_sequence' and tp.alphas == (1.0, 0.5, 0.25)
    bad = _write(tmp_path, [0.5, 1.0], 'rising.json')
    with pytest.raises(ConfigError):
        parse_theory('user:' + bad)


def test_flags_override_config(tmp_path):
    path = _write(tmp_path, _gradient_doc())
    args = build_parser().parse_args(['verify', '--config', path, '--kmax', '4', '--no-obbt',
                                      '--cut-mode', 'off', '--epsilon', '0.3'])
    cfg = apply_flags(load_config(path), args)
    assert cfg.verify.kmax == 4
    assert cfg.verify.obbt_enabled is False
    assert cfg.verify.cut_mode == 'off'
    assert cfg.epsilon == 0.3


def test_bad_flag_value_is_a_config_error(tmp_path):
    path = _write(tmp_path, _gradient_doc())
    assert run_cli(['verify', '--config', path, '--gap', '2']) == EXIT_CONFIG


def test_verify_writes_outputs(tmp_path, capsys):
    path = _write(tmp_path, _gradient_doc())
    out, js, cuts = tmp_path / 'r.csv', tmp_path / 'r.json', tmp_path / 'c.csv'
    code = run_cli(['verify', '--config', path, '--out', str(out), '--json-out', str(js),
                    '--cuts-out', str(cuts), '--bounds-out', str(tmp_path / 'bounds')])
    assert code == EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame['K']) == [1, 2]
    assert {'delta', 'best_bound', 'status', 'sample_max', 'frac_ot_tighter'} <= set(frame.columns)
    assert frame['delta'].tolist() == pytest.approx([0.5, 0.25], abs=1e-5)
    assert (frame['sample_max'] <= frame['delta'] + 1e-6).all()
    doc = json.loads(js.read_text(encoding='utf-8'))
    assert doc['family'] == 'gradient'
    assert list(pd.read_csv(cuts).columns)[:3] == ['round', 'step', 'component']
    assert (tmp_path / 'bounds' / 'bounds_K002.json').exists()
    assert 'best_bound' in capsys.readouterr().out


def test_epsilon_exceeded(tmp_path):
    doc = _gradient_doc()
    doc['epsilon'] = 0.1
    path = _write(tmp_path, doc)
    assert run_cli(['verify', '--config', path]) == EXIT_EPSILON
    assert run_cli(['verify', '--config', path, '--epsilon', '0.6']) == EXIT_OK


def test_sample_command(tmp_path):
    path = _write(tmp_path, _gradient_doc())
    out = tmp_path / 's.csv'
    assert run_cli(['sample', '--config', path, '--samples', '50', '--out', str(out)]) == EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame.columns) == ['K', 'sample_max']
    assert (frame['sample_max'] <= pd.Series([0.5, 0.25]) + 1e-12).all()


def test_radius_command(tmp_path, capsys):
    path = _write(tmp_path, _gradient_doc())
    out = tmp_path / 'R.csv'
    assert run_cli(['radius', '--config', path, '--out', str(out)]) == EXIT_OK
    assert pd.read_csv(out)['R'][0] == pytest.approx(1.0, abs=1e-5)
    assert 'R = ' in capsys.readouterr().out


def test_shipped_configs_load():
    root = pathlib.Path(__file__).resolve().parents[1] / 'configs'
    for name in ('lasso.json', 'flow.json'):
        cfg = load_config(str(root / name))
        assert cfg.verify.kmax == 10
        assert cfg.samples == 10000
