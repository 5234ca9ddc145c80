"""
End-to-end tests of the command-line entry point.
"""
import hashlib
import json
import os

import numpy as np
import pandas as pd
import pytest

import cli
from cli import EXIT_CONFIG, EXIT_OK, RunConfig, build_parser, main, run_config_from_args
from config import get_solver_config

SMALL_RUN = ['--transducer', 'H131', '--medium', 'water', '--f0', '0.25e6', '--nw', '3', '--harmonics', '3',
             '--n-points', '256', '--power', '10']


@pytest.fixture(scope='module')
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp('run')
    assert main(['simulate', *SMALL_RUN, '--out', str(out), '--dump-fields']) == EXIT_OK
    return out


def test_plan_prints_the_report(capsys):
    assert main(['plan', '--transducer', 'H131', '--medium', 'water', '--harmonics', '5']) == EXIT_OK
    out = capsys.readouterr().out
    assert 'Total DOF reduction' in out


def test_plan_as_json(capsys):
    assert main(['plan', '--harmonics', '3', '--json']) == EXIT_OK
    plan = json.loads(capsys.readouterr().out)
    assert [lv['harmonic_index'] for lv in plan['levels']] == [2, 3]


def test_unknown_medium_is_a_config_error(tmp_path):
    out = tmp_path / 'never'
    assert main(['simulate', '--medium', 'mercury', '--out', str(out)]) == EXIT_CONFIG
    assert not out.exists()


@pytest.mark.parametrize('argv', [
    ['simulate', '--harmonics', '0'],
    ['simulate', '--power', '-5'],
    ['simulate', '--mode', 'vie'],
    ['simulate', '--slab', 'kidney', 'x', '1e-3', '--mode', 'vie'],
    ['plan', '--harmonics', '1'],
    ['converge', 'domain', '--fractions', 'no-such-table'],
])
def test_bad_arguments_exit_with_config_error(tmp_path, argv):
    assert main([*argv, '--out', str(tmp_path / 'out')]) == EXIT_CONFIG


def test_malformed_config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text('{"power": 10,\n "harmonics": }', encoding='utf-8')
    assert main(['plan', '--config', str(path)]) == EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'powr': 10}), encoding='utf-8')
    assert main(['plan', '--config', str(path)]) == EXIT_CONFIG


def test_flags_override_the_config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'power': 10, 'harmonics': 4, 'medium': 'liver'}), encoding='utf-8')
    args = build_parser().parse_args(['plan', '--config', str(path), '--power', '25'])
    config = run_config_from_args(args)
    assert (config.power, config.harmonics, config.medium) == (25.0, 4, 'liver')


def test_slab_flag_builds_a_slab_config():
    args = build_parser().parse_args(['simulate', '--mode', 'vie', '--slab', 'kidney', '0.02', '4e-3'])
    config = run_config_from_args(args)
    assert config.slab.medium == 'kidney'
    assert config.slab.thickness == pytest.approx(4e-3)


def test_defaults():
    config = RunConfig()
    assert (config.transducer, config.medium, config.harmonics, config.mode) == ('H131', 'water', 5, 'homogeneous')


def test_simulate_writes_every_output(small_run):
    names = {p.name for p in small_run.iterdir()}
    expected = {'axis_p1.csv', 'axis_p2.csv', 'axis_p3.csv', 'plan.txt', 'plan.json', 'timings.csv',
                'manifest.json', 'field_p1.bin', 'field_p1.json', 'field_p2.bin', 'field_p3.json'}
    assert expected <= names

    axis = pd.read_csv(small_run / 'axis_p2.csv')
    assert list(axis.columns) == ['x_m', 're_Pa', 'im_Pa', 'abs_Pa']
    assert axis['abs_Pa'].max() > 0
    assert (axis['x_m'].diff().dropna() > 0).all()


def test_manifest_hashes_match_the_outputs(small_run):
    manifest = json.loads((small_run / 'manifest.json').read_text(encoding='utf-8'))
    assert manifest['inputs']['harmonics'] == 3
    assert manifest['seed'] is None
    assert manifest['normalization'] > 0
    assert 'numpy' in manifest['versions']
    for name, digest in manifest['outputs'].items():
        assert hashlib.sha256((small_run / name).read_bytes()).hexdigest() == digest


def test_field_dump_layout(small_run):
    header = json.loads((small_run / 'field_p2.json').read_text(encoding='utf-8'))
    n_voxels = int(np.prod(header['dims']))
    assert (small_run / 'field_p2.bin').stat().st_size == 16 * n_voxels
    assert header['order'] == 'x-fastest'

    values = np.fromfile(small_run / 'field_p2.bin', dtype='<c16').reshape(header['dims'], order='F')
    axis = pd.read_csv(small_run / 'axis_p2.csv')
    assert np.abs(values).max() >= axis['abs_Pa'].max() * (1 - 1e-9)


def test_rerun_from_manifest_is_reproducible(small_run, tmp_path):
    again = tmp_path / 'again'
    assert main(['simulate', '--from-manifest', str(small_run / 'manifest.json'), '--out', str(again)]) == EXIT_OK
    for name in ('axis_p1.csv', 'axis_p2.csv', 'axis_p3.csv'):
        assert (again / name).read_bytes() == (small_run / name).read_bytes()


def test_single_harmonic_writes_only_the_incident_profile(tmp_path):
    out = tmp_path / 'p1'
    assert main(['simulate', *SMALL_RUN[:-6], '--harmonics', '1', '--n-points', '256', '--out', str(out)]) == EXIT_OK
    assert {p.name for p in out.iterdir()} == {'axis_p1.csv', 'manifest.json'}


def test_validate_passes(capsys):
    assert main(['validate']) == EXIT_OK
    out = capsys.readouterr().out
    assert '9/9 invariant checks passed' in out
    assert '❌' not in out


def test_h101_timing_table(tmp_path):
    out = tmp_path / 'h101'
    argv = ['simulate', '--transducer', 'H101', '--medium', 'water', '--f0', '0.15e6', '--nw', '3',
            '--harmonics', '5', '--n-points', '256', '--power', '100', '--out', str(out)]
    assert main(argv) == EXIT_OK

    timings = pd.read_csv(out / 'timings.csv')
    assert list(timings['harmonic']) == [2, 3, 4, 5]
    assert {'n_voxels', 'meshing_s', 'interpolation_s', 'evaluate_green_s', 'compute_p_s'} <= set(timings.columns)
    assert timings['n_voxels'].is_monotonic_increasing


def test_threads_flag_is_scoped_to_the_command(monkeypatch):
    seen = []
    monkeypatch.setattr(cli, 'cmd_plan', lambda config, as_json=False: seen.append(get_solver_config()['threads']))

    assert main(['plan', '--threads', '3']) == EXIT_OK
    assert seen == [3]
    assert os.environ['FUS_THREADS'] == '1'

    monkeypatch.delenv('FUS_THREADS')
    assert main(['plan', '--threads', '2']) == EXIT_OK
    assert seen == [3, 2]
    assert 'FUS_THREADS' not in os.environ
