"""
Evaluation Module for the GP flow toolkit
Handles transport reports of base and base + GP flows, trajectory exports
(commands: eval, export-traj) and the read-only run API
"""

import json
import os

import click
import torch
from flask import Blueprint, current_app, jsonify

from config import DTYPE, MAX_DISCRETE_OT
from core.errors import ConfigError
from core.flowode import integrate_trajectory
from core.gaussmap import from_cube, to_cube
from core.otlab import evaluate_transport, exact_discrete_ot, gap_closure
from core.toydata import DatasetSpec, sample
from modules.gp_fitting import resolve_checkpoint
from utils.checkpoint_utils import MANIFEST_NAME, check_dimensions, load_base_flow, load_gp_flow, update_manifest
from utils.export_utils import write_matching, write_trajectories
from utils.run_utils import build_config, handle_run_errors, prepare_run_dir, run_options

# Create Blueprint
evaluation_bp = Blueprint('evaluation', __name__, cli_group=None)


def held_out_data(config, base, n):
    """
    Held-out target samples: the toy dataset on a separate seed stream in 2D,
    otherwise g(z) with z ~ N(0, I)
    """
    if base.dim == 2:
        spec = DatasetSpec(config.dataset.name, n, config.dataset.seed + 1)
        return torch.as_tensor(sample(spec), dtype=DTYPE)
    generator = torch.Generator().manual_seed(int(config.seed) + 3)
    with torch.no_grad():
        return base.inverse(torch.randn(n, base.dim, generator=generator, dtype=DTYPE))


def reference_gaussian(config, dim, n):
    generator = torch.Generator().manual_seed(int(config.seed) + 2)
    return torch.randn(n, dim, generator=generator, dtype=DTYPE)


@evaluation_bp.cli.command('eval')
@run_options
@click.option('--nf-checkpoint', default=None, help='Base flow checkpoint (default: <run>/nf.ckpt)')
@click.option('--gp-checkpoint', default=None, help='GP flow checkpoint (default: <run>/gp.ckpt if present)')
@click.option('--n-eval', type=int, default=None, help=f'Matched sample count (<= {MAX_DISCRETE_OT})')
@handle_run_errors
def eval_command(config_path, preset, overrides, output_dir, seed, nf_checkpoint, gp_checkpoint, n_eval):
    """Report OT cost, NLL, discrete OT and agreement for base and base + GP"""
    if n_eval is not None:
        overrides = (*overrides, f'n_eval={n_eval}')
    config = build_config(config_path, preset, overrides, output_dir, seed)
    run_dir = prepare_run_dir(config)

    base = load_base_flow(resolve_checkpoint(run_dir, nf_checkpoint, 'nf.ckpt'))
    gp = None
    if gp_checkpoint or os.path.exists(os.path.join(run_dir, 'gp.ckpt')):
        gp = load_gp_flow(resolve_checkpoint(run_dir, gp_checkpoint, 'gp.ckpt'))
    check_dimensions(base, gp)

    n = config.n_eval
    data = held_out_data(config, base, n)
    reference = reference_gaussian(config, base.dim, n)
    discrete_cost, perm = exact_discrete_ot(data, reference)

    base_report = evaluate_transport(base, data, reference, None, config.seed, perm, discrete_cost)
    report = {'base': base_report.to_dict(), 'composed': None, 'gap_closure': None}
    composed_images = None
    if gp is not None:
        composed = evaluate_transport(base, data, reference, gp, config.seed, perm, discrete_cost)
        report['composed'] = composed.to_dict()
        report['gap_closure'] = gap_closure(base_report.ot_cost, composed.ot_cost, discrete_cost)
        with torch.no_grad():
            composed_images = gp(base.forward(data)[0])

    with open(os.path.join(run_dir, 'report.json'), 'w') as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write('\n')

    with torch.no_grad():
        base_images = base.forward(data)[0]
    write_matching(os.path.join(run_dir, 'matching.csv'), data.numpy(), reference.numpy(), perm,
                   base_images.numpy(), None if composed_images is None else composed_images.numpy())
    update_manifest(run_dir, 'eval', config.seed, ['config.json', 'report.json', 'matching.csv'])

    click.echo(f"base ot_cost={base_report.ot_cost:.5f} agreement={base_report.agreement:.3f}")
    if gp is not None:
        click.echo(f"base+GP ot_cost={report['composed']['ot_cost']:.5f} "
                   f"agreement={report['composed']['agreement']:.3f}")
    click.echo(f"discrete OT cost={discrete_cost:.5f}")


@evaluation_bp.cli.command('export-traj')
@run_options
@click.option('--gp-checkpoint', default=None, help='GP flow checkpoint (default: <run>/gp.ckpt)')
@click.option('--n-particles', type=int, default=64, show_default=True)
@click.option('--space', type=click.Choice(['gaussian', 'cube']), default='gaussian', show_default=True)
@handle_run_errors
def export_traj_command(config_path, preset, overrides, output_dir, seed, gp_checkpoint, n_particles, space):
    """Write RK4 particle paths of the GP flow to trajectories.csv"""
    config = build_config(config_path, preset, overrides, output_dir, seed)
    run_dir = prepare_run_dir(config)
    gp = load_gp_flow(resolve_checkpoint(run_dir, gp_checkpoint, 'gp.ckpt'))
    if n_particles <= 0:
        raise ConfigError("--n-particles must be positive")

    generator = torch.Generator().manual_seed(int(config.seed) + 4)
    z = torch.randn(n_particles, gp.dim, generator=generator, dtype=DTYPE)
    with torch.no_grad():
        start = to_cube(gp, z)
        traj = integrate_trajectory(gp.phi, start)
        states = traj.states if space == 'cube' else from_cube(traj.states, start, z)

    write_trajectories(os.path.join(run_dir, 'trajectories.csv'), traj.times.numpy(), states.numpy())
    update_manifest(run_dir, 'export-traj', config.seed, ['config.json', 'trajectories.csv'])
    current_app.logger.info("Exported %d trajectories (%s space)", n_particles, space)


# Read-only run API

def _run_path(name, filename):
    if not name or name.startswith('.') or os.sep in name or (os.altsep and os.altsep in name):
        return None
    return os.path.join(current_app.config['RUNS_DIR'], name, filename)


def _json_file(name, filename):
    path = _run_path(name, filename)
    if path is None:
        return jsonify({'success': False, 'error': 'Invalid run name'}), 400
    if not os.path.exists(path):
        return jsonify({
            'success': False,
            'error': 'Not found',
            'message': f"Run '{name}' has no {filename}",
        }), 404
    with open(path) as fh:
        return jsonify({'success': True, 'run': name, filename.split('.')[0]: json.load(fh)})


@evaluation_bp.route('/api/runs', methods=['GET'])
def list_runs():
    """List run directories that carry a manifest"""
    try:
        runs_dir = current_app.config['RUNS_DIR']
        runs = []
        if os.path.isdir(runs_dir):
            for name in sorted(os.listdir(runs_dir)):
                manifest_path = os.path.join(runs_dir, name, MANIFEST_NAME)
                if not os.path.isfile(manifest_path):
                    continue
                with open(manifest_path) as fh:
                    manifest = json.load(fh)
                runs.append({
                    'name': name,
                    'seed': manifest.get('seed'),
                    'commands': [c['command'] for c in manifest.get('commands', [])],
                    'files': sorted(manifest.get('files', {})),
                })
        return jsonify({'success': True, 'runs': runs, 'count': len(runs)})
    except Exception as e:
        current_app.logger.exception("Listing runs failed")
        return jsonify({'success': False, 'error': str(e)}), 500


@evaluation_bp.route('/api/runs/<name>/report', methods=['GET'])
def run_report(name):
    """report.json of a run"""
    return _json_file(name, 'report.json')


@evaluation_bp.route('/api/runs/<name>/manifest', methods=['GET'])
def run_manifest(name):
    """manifest.json of a run"""
    return _json_file(name, MANIFEST_NAME)
