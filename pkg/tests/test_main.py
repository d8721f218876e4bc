import json
import os

import numpy as np
import pandas as pd
import pytest

from errors import ResourceError, SchemaError, StudyError
from main import HomogenizationWorkbench, fine_grid, main, parse_experiment
from report_generator import REPORT_COLUMNS, read_report

ROOT = os.path.join(os.path.dirname(__file__), '..')
SETTINGS = os.path.join(ROOT, 'config.yaml')

CONSTANT_MODEL = {'family': 'linear', 'p': 2.0, 'alpha': 1.0, 'c0': 1.0, 'c1': 2.1, 'c2': 1.9,
                  'coefficients': {'dim': 1, 'space': {'mean': 2.0}}}


def _study_config(tmp_path, **overrides):
    data = {
        'model': CONSTANT_MODEL,
        'mu': 2,
        'epsilons': [0.5, 0.25],
        'problem': {'horizon': 0.25, 'source': {'type': 'constant', 'value': 1.0},
                    'initial': {'type': 'sine', 'amplitude': 1.0, 'modes': [1]}},
        'grids': {'cell': {'n_space': 16, 'n_time': 4}, 'fine': {'elements_per_cell': 8, 'steps_per_period': 2}},
        'structure_samples': 500,
        'output_dir': str(tmp_path / 'study'),
    }
    data.update(overrides)
    return data


def _write(tmp_path, data, name='experiment.json'):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def workbench():
    return HomogenizationWorkbench(SETTINGS)


def test_schema_errors_carry_json_paths():
    with pytest.raises(SchemaError) as info:
        parse_experiment({'model': 'harmonic_mean_1d', 'mu': 2, 'grids': {'cell': {'n_space': 64, 'bogus': 1}}})
    assert info.value.paths == ['$.grids.cell.bogus']
    with pytest.raises(SchemaError) as info:
        parse_experiment({'model': 'harmonic_mean_1d', 'epsilons': [0.25, 0.5]})
    assert set(info.value.paths) == {'$.mu', '$.epsilons'}
    with pytest.raises(SchemaError, match="integer"):
        parse_experiment({'model': 'harmonic_mean_1d', 'mu': 2, 'epsilons': [0.3]})


def test_fine_grid_from_settings(tmp_path):
    config = parse_experiment(_study_config(tmp_path))
    grid = fine_grid(config, 0.25, 1)
    assert (grid.n_x, grid.n_t, grid.steps_per_cell) == (32, 8, 2)


def test_study_needs_epsilons(tmp_path, workbench):
    config = parse_experiment(_study_config(tmp_path, epsilons=[]))
    with pytest.raises(SchemaError, match="at least one"):
        workbench.run_study(config)


def test_nonlinear_model_needs_table(tmp_path, workbench):
    config = parse_experiment({'model': 'p_laplacian_1d_p4', 'mu': 2, 'epsilons': [0.5]})
    with pytest.raises(SchemaError) as info:
        workbench.solve(config, str(tmp_path), homogenized=True)
    assert info.value.paths == ['$.table']


def test_cli_cell_solve_prints_harmonic_mean(tmp_path, capsys):
    path = _write(tmp_path, {'model': 'harmonic_mean_1d', 'mu': 2, 'grids': {'cell': {'n_space': 1024}}})
    assert main(['--settings', SETTINGS, 'cell-solve', '--config', path, '--xi', '1.0']) == 0
    first_line = capsys.readouterr().out.splitlines()[0]
    assert first_line.startswith('b(1) = 1.732')


def test_cli_check_structure_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, {'model': 'harmonic_mean_1d', 'mu': 2, 'structure_samples': 1000}, 'good.json')
    assert main(['--settings', SETTINGS, 'check-structure', '--config', good]) == 0
    overclaimed = dict(CONSTANT_MODEL, c1=12.0, c2=10.0)
    bad = _write(tmp_path, {'model': overclaimed, 'mu': 2, 'structure_samples': 1000}, 'bad.json')
    assert main(['--settings', SETTINGS, 'check-structure', '--config', bad]) == 1


def test_settings_path_is_logged(tmp_path, caplog):
    good = _write(tmp_path, {'model': 'harmonic_mean_1d', 'mu': 2, 'structure_samples': 100})
    assert main(['--settings', SETTINGS, 'check-structure', '--config', good]) == 0
    assert 'Settings loaded from' in caplog.text


def test_cli_error_exit_codes(tmp_path, capsys):
    malformed = _write(tmp_path, {'model': 'harmonic_mean_1d', 'mu': -1})
    assert main(['--settings', SETTINGS, 'check-structure', '--config', malformed]) == 2
    assert '$.mu' in capsys.readouterr().err
    broken = tmp_path / 'broken.json'
    broken.write_text('{"model": ')
    assert main(['--settings', SETTINGS, 'check-structure', '--config', str(broken)]) == 2
    missing = str(tmp_path / 'missing.json')
    assert main(['--settings', SETTINGS, 'check-structure', '--config', missing]) == 4


def test_solve_writes_trajectory_and_ledger(tmp_path, workbench):
    config = parse_experiment(_study_config(tmp_path))
    result = workbench.solve(config, str(tmp_path / 'out'))
    assert result['kind'] == 'fine'
    assert result['grid']['epsilon'] == 0.5
    assert all(os.path.exists(f) for f in result['files'])
    assert workbench.solve_counts == {'fine': 1, 'homogenized': 0}


def test_constant_coefficient_study(tmp_path, workbench):
    config = parse_experiment(_study_config(tmp_path))
    report = workbench.run_study(config)
    assert workbench.solve_counts == {'fine': 2, 'homogenized': 1}
    frame = read_report(os.path.join(config.output_dir, 'convergence_report.csv'))
    assert list(frame.columns) == REPORT_COLUMNS
    assert frame['epsilon'].tolist() == [0.5, 0.25]
    # on the finest grid the fine and homogenized problems coincide
    assert frame['grad_error_lp'].iloc[-1] < 1e-6
    # the corrector of a constant coefficient is the averaged gradient at any quantization
    assert np.all(frame['remainder_lp'] <= frame['averaged_error_lp'] + 1e-12)
    assert set(report.diagnostics) == {'0.5', '0.25'}
    names = {os.path.basename(f) for f in report.files}
    assert {'convergence_report.csv', 'convergence.svg', 'diagnostics.json', 'summary.md'} <= names
    assert os.path.exists(os.path.join(config.output_dir, 'ledgers', 'homogenized.csv'))
    assert not os.path.exists(os.path.join(config.output_dir, 'fields'))


def test_study_exports_fields(tmp_path, workbench):
    config = parse_experiment(_study_config(tmp_path, export_fields=True))
    workbench.run_study(config)
    frame = pd.read_csv(os.path.join(config.output_dir, 'fields', 'fields_eps_0.5.csv'))
    assert list(frame.columns) == ['x0', 'q', 't', 'corrector_c0', 'averaged_c0', 'remainder_c0']
    grid = fine_grid(config, 0.5, 1)
    assert len(frame) == grid.n_t * grid.mesh().n_quad
    np.testing.assert_allclose(frame['corrector_c0'], frame['averaged_c0'], atol=1e-12)
    assert os.path.exists(os.path.join(config.output_dir, 'fields', 'fields_eps_0.25.csv'))

def test_study_is_reproducible(tmp_path):
    frames = []
    for run in ('first', 'second'):
        config = parse_experiment(_study_config(tmp_path, output_dir=str(tmp_path / run)))
        HomogenizationWorkbench(SETTINGS, threads=2).run_study(config)
        frames.append(pd.read_csv(tmp_path / run / 'convergence_report.csv').drop(columns='wall_time_s'))
    pd.testing.assert_frame_equal(frames[0], frames[1], check_exact=True)


def test_study_budget_failure_keeps_partial_report(tmp_path, workbench):
    config = parse_experiment(_study_config(tmp_path, cache_budget=1))
    with pytest.raises(StudyError) as info:
        workbench.run_study(config)
    assert info.value.stage == 'corrector eps=0.5'
    assert isinstance(info.value.cause, ResourceError)
    assert info.value.rows == []
    assert info.value.exit_code == 3
    summary = open(os.path.join(config.output_dir, 'summary.md')).read()
    assert 'Stage `corrector eps=0.5` failed' in summary


def test_cli_report_rerenders(tmp_path, workbench, capsys):
    config = parse_experiment(_study_config(tmp_path))
    workbench.run_study(config)
    csv_path = os.path.join(config.output_dir, 'convergence_report.csv')
    assert main(['--settings', SETTINGS, 'report', '--csv', csv_path, '--out', str(tmp_path / 'plots')]) == 0
    assert os.path.exists(tmp_path / 'plots' / 'convergence.svg')


@pytest.mark.slow
def test_oscillating_study_acceptance(tmp_path):
    with open(os.path.join(ROOT, 'configs', 'oscillating_mu2.json')) as f:
        data = json.load(f)
    data['output_dir'] = str(tmp_path / 'oscillating')
    report = HomogenizationWorkbench(SETTINGS, threads=4).run_study(parse_experiment(data))
    frame = report.frame()
    remainders = frame['remainder_lp'].to_numpy()
    assert all(b < a for a, b in zip(remainders, remainders[1:]))
    assert remainders[0] / remainders[-1] >= 2.0
    assert frame['grad_error_lp'].min() >= 5.0 * remainders[-1]
    bounds = [entry['uniform_bound'] for entry in report.diagnostics.values()]
    assert max(bounds) < 2.0 * min(bounds)
