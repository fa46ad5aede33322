import numpy as np

from core.otlab import TransportReport
from utils.export_utils import (
    read_gp_curve,
    read_matching,
    read_rows,
    read_trajectories,
    write_gp_curve,
    write_matching,
    write_nf_curve,
    write_trajectories,
)


def test_gp_curve_keeps_missing_values_empty(tmp_path):
    path = tmp_path / 'gp_curve.csv'
    curve = [
        TransportReport(ot_cost=1.25, nll=None, energy=0.0, epoch=0, euler_penalty=0.0, lambda_=0.0),
        TransportReport(ot_cost=1.0, nll=2.5, energy=0.01, epoch=1, euler_penalty=0.3, lambda_=5e-4),
    ]
    write_gp_curve(path, curve)
    lines = path.read_text().splitlines()
    assert lines[0] == 'epoch,ot_cost,nll,euler_penalty,energy,lambda'
    assert lines[1].split(',')[2] == ''
    assert read_gp_curve(path) == curve


def test_nf_curve_columns(tmp_path):
    path = tmp_path / 'nf_curve.csv'
    write_nf_curve(path, [{'epoch': 0, 'train_nll': 3.0, 'heldout_nll': float('nan')}])
    assert read_rows(path) == [{'epoch': 0, 'train_nll': 3.0, 'heldout_nll': None}]


def test_trajectories_layout(tmp_path):
    path = tmp_path / 'trajectories.csv'
    times = np.linspace(0, 1, 4)
    states = np.random.default_rng(0).normal(size=(4, 3, 2))
    write_trajectories(path, times, states)
    lines = path.read_text().splitlines()
    assert lines[0] == 'particle,t,x1,x2'
    assert len(lines) == 1 + 3 * 4
    read_times, read_states = read_trajectories(path)
    assert np.array_equal(read_times, times)
    assert np.array_equal(read_states, states)


def test_header_only_trajectories(tmp_path):
    path = tmp_path / 'trajectories.csv'
    path.write_text('particle,t,x1,x2\n')
    times, states = read_trajectories(path)
    assert times.size == 0 and states.size == 0


def test_matching_without_gp_images(tmp_path):
    path = tmp_path / 'matching.csv'
    rng = np.random.default_rng(1)
    source, target, base = rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    perm = np.array([2, 0, 1, 4, 3])
    write_matching(path, source, target, perm, base)
    matching = read_matching(path)
    assert matching['gp'] is None
    assert np.array_equal(matching['match'], perm)
    assert np.array_equal(matching['target'], target[perm])
    assert np.array_equal(matching['base'], base)
