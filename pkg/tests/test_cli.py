import json
import os

import numpy as np
import pytest

from config import EXIT_NUMERICAL
from core.errors import DegenerateJacobianError, NonFiniteInputError, OutOfDomainError
from core.otlab import TransportReport
from utils.checkpoint_utils import load_checkpoint
from utils.export_utils import read_matching
from utils.run_utils import handle_run_errors

SMALL = [
    '--set', 'dataset.n=400',
    '--set', 'base.n_layers=2',
    '--set', 'base.hidden=[8]',
    '--set', 'base.epochs=2',
    '--set', 'base.batch_size=100',
    '--set', 'optim.epochs=1',
    '--set', 'optim.batch_size=200',
    '--set', 'optim.monitor_size=50',
    '--set', 'gp.hidden=[4]',
    '--set', 'gp.n_steps=4',
    '--set', 'n_eval=100',
]


def invoke(runner, command, run_dir, *extra):
    return runner.invoke(args=[command, '--output-dir', str(run_dir), *SMALL, *extra])


@pytest.fixture
def trained_run(runner, tmp_path):
    run_dir = tmp_path / 'run'
    result = invoke(runner, 'train-nf', run_dir, '--preset', 'eight_gaussians')
    assert result.exit_code == 0, result.output
    return run_dir


def test_sample_data(runner, tmp_path):
    result = invoke(runner, 'sample-data', tmp_path / 'data', '--preset', 'pinwheel')
    assert result.exit_code == 0, result.output
    lines = (tmp_path / 'data' / 'dataset.csv').read_text().splitlines()
    assert lines[0] == 'x1,x2' and len(lines) == 401


def test_train_nf_writes_checkpoint_curve_and_manifest(trained_run):
    assert (trained_run / 'nf.ckpt').exists()
    lines = (trained_run / 'nf_curve.csv').read_text().splitlines()
    assert lines[0] == 'epoch,train_nll,heldout_nll' and len(lines) == 1 + 3
    config = json.loads((trained_run / 'config.json').read_text())
    assert config['dataset']['name'] == 'eight_gaussians' and config['schema_version'] == 1
    manifest = json.loads((trained_run / 'manifest.json').read_text())
    assert manifest['commands'][0]['command'] == 'train-nf'
    assert set(manifest['files']) == {'config.json', 'nf.ckpt', 'nf_curve.csv'}


def test_train_nf_with_zero_epochs_keeps_initial_flow(runner, tmp_path):
    result = invoke(runner, 'train-nf', tmp_path / 'zero', '--set', 'base.epochs=0')
    assert result.exit_code == 0, result.output
    header, values = load_checkpoint(tmp_path / 'zero' / 'nf.ckpt')
    assert header['kind'] == 'coupling' and values.size == header['param_count']


def test_bad_dataset_exits_with_config_code(runner, tmp_path):
    result = invoke(runner, 'train-nf', tmp_path / 'bad', '--set', 'dataset.name=spirals')
    assert result.exit_code == 2
    assert 'dataset.name' in result.output


def test_unknown_preset_exits_with_config_code(runner, tmp_path):
    assert invoke(runner, 'train-nf', tmp_path / 'bad', '--preset', 'swiss_roll').exit_code == 2


def test_fit_gp_without_base_checkpoint(runner, tmp_path):
    assert invoke(runner, 'fit-gp', tmp_path / 'empty').exit_code == 2


def test_fit_gp_forward_with_timing(runner, trained_run):
    result = invoke(runner, 'fit-gp', trained_run, '--timing')
    assert result.exit_code == 0, result.output
    assert 'euler_evaluations=0' in result.output
    assert 'ot_cost' in result.output
    for name in ('gp.ckpt', 'gp_curve.csv', 'fit_summary.json'):
        assert (trained_run / name).exists()
    assert len((trained_run / 'gp_curve.csv').read_text().splitlines()) == 1 + 2
    summary = json.loads((trained_run / 'fit_summary.json').read_text())
    assert summary['stats']['mode'] == 'forward' and summary['final']['epoch'] == 1


def test_fit_gp_counts_euler_evaluations(runner, trained_run):
    result = invoke(runner, 'fit-gp', trained_run, '--timing', '--set', 'euler.lambda0=1e-3')
    assert result.exit_code == 0, result.output
    assert 'euler_evaluations=0' not in result.output


def test_backward_fit_needs_invertible_base(runner, tmp_path):
    run_dir = tmp_path / 'opaque'
    opaque = ['--set', 'base.kind=synthetic', '--set', 'base.invertible=false', '--set', 'gp.mode=backward']
    assert invoke(runner, 'train-nf', run_dir, *opaque).exit_code == 0
    result = invoke(runner, 'fit-gp', run_dir, *opaque)
    assert result.exit_code == 2
    assert not (run_dir / 'gp.ckpt').exists()


def test_backward_fit_on_synthetic_base(runner, tmp_path):
    run_dir = tmp_path / 'synthetic'
    synthetic = ['--set', 'base.kind=synthetic', '--set', 'base.dim=3', '--set', 'gp.mode=backward',
                 '--set', 'optim.epoch_samples=400']
    assert invoke(runner, 'train-nf', run_dir, *synthetic).exit_code == 0
    result = invoke(runner, 'fit-gp', run_dir, *synthetic)
    assert result.exit_code == 0, result.output
    summary = json.loads((run_dir / 'fit_summary.json').read_text())
    assert summary['stats']['mode'] == 'backward' and summary['stats']['steps'] == 2


def test_escaping_field_exits_with_numerical_code(runner, trained_run):
    result = invoke(runner, 'fit-gp', trained_run, '--set', 'gp.boundary=free', '--set', 'gp.final_scale=50')
    assert result.exit_code == 3
    assert (trained_run / 'gp.partial.ckpt').exists()
    assert not (trained_run / 'gp.ckpt').exists()
    header, _ = load_checkpoint(trained_run / 'gp.partial.ckpt')
    assert header['aborted'] is True


def test_eval_with_identity_gp_matches_base(runner, trained_run):
    identity = ['--set', 'optim.epochs=0', '--set', 'gp.final_scale=0']
    assert invoke(runner, 'fit-gp', trained_run, *identity).exit_code == 0
    result = invoke(runner, 'eval', trained_run, *identity)
    assert result.exit_code == 0, result.output

    report = json.loads((trained_run / 'report.json').read_text())
    base = TransportReport.from_dict(report['base'])
    composed = TransportReport.from_dict(report['composed'])
    assert composed.ot_cost == pytest.approx(base.ot_cost, abs=1e-9)
    assert composed.discrete_ot_cost == base.discrete_ot_cost
    assert base.sample_count == 100
    assert len((trained_run / 'matching.csv').read_text().splitlines()) == 101


def test_eval_handles_latents_in_the_gaussian_tails(runner, tmp_path):
    run_dir = tmp_path / 'wide'
    wide = ['--set', 'base.kind=scale', '--set', 'base.scale=10',
            '--set', 'optim.epochs=0', '--set', 'gp.final_scale=0']
    for command in ('train-nf', 'fit-gp', 'eval'):
        result = invoke(runner, command, run_dir, *wide)
        assert result.exit_code == 0, result.output

    assert np.abs(read_matching(run_dir / 'matching.csv')['base']).max() > 8
    report = json.loads((run_dir / 'report.json').read_text())
    base = TransportReport.from_dict(report['base'])
    composed = TransportReport.from_dict(report['composed'])
    assert composed.ot_cost == pytest.approx(base.ot_cost, abs=1e-9)
    assert composed.nll == pytest.approx(base.nll, abs=1e-6)


@pytest.mark.parametrize('error', [
    OutOfDomainError('erf^-1 argument out of domain'),
    DegenerateJacobianError('determinant has the wrong sign'),
    NonFiniteInputError('input must be finite'),
])
def test_remaining_library_errors_exit_with_numerical_code(app, error):
    @handle_run_errors
    def failing():
        raise error

    with app.app_context():
        with pytest.raises(SystemExit) as info:
            failing()
    assert info.value.code == EXIT_NUMERICAL


def test_eval_base_only(runner, trained_run):
    result = invoke(runner, 'eval', trained_run)
    assert result.exit_code == 0, result.output
    report = json.loads((trained_run / 'report.json').read_text())
    assert report['composed'] is None and report['gap_closure'] is None


def test_eval_rejects_too_many_samples(runner, trained_run):
    assert invoke(runner, 'eval', trained_run, '--n-eval', '5000').exit_code == 2


def test_eval_dimension_mismatch(runner, trained_run, tmp_path):
    assert invoke(runner, 'fit-gp', trained_run, '--set', 'optim.epochs=0').exit_code == 0
    other = tmp_path / 'three'
    three = ['--set', 'base.kind=synthetic', '--set', 'base.dim=3', '--set', 'gp.mode=backward']
    assert invoke(runner, 'train-nf', other, *three).exit_code == 0
    result = invoke(runner, 'eval', other, *three, '--gp-checkpoint', str(trained_run / 'gp.ckpt'))
    assert result.exit_code == 2


def test_export_traj(runner, trained_run):
    assert invoke(runner, 'fit-gp', trained_run).exit_code == 0
    result = invoke(runner, 'export-traj', trained_run, '--n-particles', '8')
    assert result.exit_code == 0, result.output
    lines = (trained_run / 'trajectories.csv').read_text().splitlines()
    assert lines[0] == 'particle,t,x1,x2'
    assert len(lines) == 1 + 8 * 5


def test_plot_is_byte_identical(runner, trained_run):
    for command in ('fit-gp', 'eval', 'export-traj'):
        assert invoke(runner, command, trained_run).exit_code == 0
    figures = ('matching.svg', 'trajectories.svg', 'curves.svg', 'velocity.svg')

    result = runner.invoke(args=['plot', '--run-dir', str(trained_run)])
    assert result.exit_code == 0, result.output
    first = {name: (trained_run / name).read_bytes() for name in figures}
    assert runner.invoke(args=['plot', '--run-dir', str(trained_run)]).exit_code == 0
    assert all((trained_run / name).read_bytes() == first[name] for name in figures)


def test_plot_without_exports(runner, tmp_path):
    (tmp_path / 'nothing').mkdir()
    assert runner.invoke(args=['plot', '--run-dir', str(tmp_path / 'nothing')]).exit_code == 2


def test_plot_skips_empty_trajectories(runner, tmp_path):
    run_dir = tmp_path / 'sparse'
    run_dir.mkdir()
    (run_dir / 'trajectories.csv').write_text('particle,t,x1,x2\n')
    result = runner.invoke(args=['plot', '--run-dir', str(run_dir)])
    assert result.exit_code == 0
    assert 'empty' in result.output
    assert not os.path.exists(run_dir / 'trajectories.svg')


@pytest.mark.slow
def test_two_moons_pipeline_closes_part_of_the_gap(runner, tmp_path):
    run_dir = tmp_path / 'moons'
    args = ['--preset', 'two_moons', '--set', 'dataset.n=4000', '--set', 'base.epochs=100',
            '--set', 'base.batch_size=200', '--set', 'base.lr=2e-3', '--set', 'optim.epochs=100',
            '--set', 'optim.batch_size=500', '--set', 'optim.lr=1e-2', '--set', 'n_eval=1000']
    for command in ('train-nf', 'fit-gp', 'eval'):
        result = runner.invoke(args=[command, '--output-dir', str(run_dir), *args])
        assert result.exit_code == 0, result.output
    report = json.loads((run_dir / 'report.json').read_text())
    assert report['composed']['ot_cost'] < report['base']['ot_cost']
    assert abs(report['composed']['nll'] - report['base']['nll']) < 5e-3
