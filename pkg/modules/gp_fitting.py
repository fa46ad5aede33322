"""
GP Fitting Module for the GP flow toolkit
Handles fitting a Gaussian-preserving flow on top of a base flow checkpoint
(command: fit-gp)
"""

import json
import os

import click
import torch
from flask import Blueprint, current_app

from config import DTYPE
from core.errors import ConfigError, DimensionMismatchError, TrainingAbortedError
from core.eulerreg import EulerPenaltyConfig
from core.graddesk import GpFitConfig, build_gp, fit_gp_backward, fit_gp_forward
from core.toydata import sample
from utils.checkpoint_utils import load_base_flow, save_gp_flow, update_manifest
from utils.export_utils import write_gp_curve
from utils.run_utils import build_config, handle_run_errors, prepare_run_dir, run_options

# Create Blueprint
gp_fitting_bp = Blueprint('gp_fitting', __name__, cli_group=None)


def gp_fit_config(config, callback=None):
    """GpFitConfig from the gp/euler/optim sections of a RunConfig"""
    euler = EulerPenaltyConfig(
        lambda0=config.euler.lambda0,
        decay_factor=config.euler.decay_factor,
        decay_period=config.euler.decay_period,
        n_decays=config.euler.n_decays,
        dt=config.euler.dt,
        probes_per_point=config.euler.probes_per_point,
        seed=config.seed,
        jvp=config.euler.jvp,
    )
    return GpFitConfig(
        mode=config.gp.mode,
        epochs=config.optim.epochs,
        batch_size=config.optim.batch_size,
        lr=config.optim.lr,
        epoch_samples=config.optim.epoch_samples,
        monitor_size=config.optim.monitor_size,
        hidden=tuple(config.gp.hidden),
        n_steps=config.gp.n_steps,
        t_final=config.gp.t_final,
        boundary=config.gp.boundary,
        final_scale=config.gp.final_scale,
        orientation=config.gp.orientation,
        euler=euler,
        seed=config.seed,
        checkpoint_every=config.checkpoint_every,
        report_every=config.report_every,
        progress=current_app.config['PROGRESS'],
        callback=callback,
    )


def resolve_checkpoint(run_dir, path, default_name):
    path = path or os.path.join(run_dir, default_name)
    if not os.path.exists(path):
        raise ConfigError(f"Checkpoint not found: {path}")
    return path


@gp_fitting_bp.cli.command('fit-gp')
@run_options
@click.option('--nf-checkpoint', default=None, help='Base flow checkpoint (default: <run>/nf.ckpt)')
@click.option('--timing', is_flag=True, help='Report Euler penalty evaluations and wall time')
@handle_run_errors
def fit_gp_command(config_path, preset, overrides, output_dir, seed, nf_checkpoint, timing):
    """Fit a GP flow in forward (data) or backward (Gaussian samples) mode"""
    config = build_config(config_path, preset, overrides, output_dir, seed)
    run_dir = prepare_run_dir(config)
    base = load_base_flow(resolve_checkpoint(run_dir, nf_checkpoint, 'nf.ckpt'))
    if base.dim != config.base.dim:
        raise DimensionMismatchError(f"Base flow checkpoint has d={base.dim}, config says base.dim={config.base.dim}")

    gp_path = os.path.join(run_dir, 'gp.ckpt')

    def checkpoint(epoch, gp, state):
        save_gp_flow(gp_path, gp, epoch=epoch)

    fit_config = gp_fit_config(config, checkpoint)
    current_app.logger.info("fit-gp: mode=%s epochs=%d lambda0=%g d=%d",
                            fit_config.mode, fit_config.epochs, fit_config.euler.lambda0, base.dim)
    try:
        if fit_config.mode == 'forward':
            data = torch.as_tensor(sample(config.dataset), dtype=DTYPE)
            result = fit_gp_forward(base, data, fit_config)
        else:
            result = fit_gp_backward(base, fit_config)
    except TrainingAbortedError as e:
        if e.last_params is not None:
            partial = os.path.join(run_dir, 'gp.partial.ckpt')
            save_gp_flow(partial, build_gp(base.dim, fit_config), e.last_params.values,
                         epoch=e.epoch, aborted=True)
            update_manifest(run_dir, 'fit-gp', config.seed, ['config.json', 'gp.partial.ckpt'])
            current_app.logger.warning("Partial checkpoint kept at %s", partial)
        raise

    save_gp_flow(gp_path, result.gp, epoch=config.optim.epochs)
    write_gp_curve(os.path.join(run_dir, 'gp_curve.csv'), result.curve)
    summary = {
        'stats': result.stats,
        'initial': result.curve[0].to_dict(),
        'final': result.curve[-1].to_dict(),
    }
    with open(os.path.join(run_dir, 'fit_summary.json'), 'w') as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write('\n')
    update_manifest(run_dir, 'fit-gp', config.seed,
                    ['config.json', 'gp.ckpt', 'gp_curve.csv', 'fit_summary.json'])

    first, last = result.curve[0], result.curve[-1]
    click.echo(f"ot_cost {first.ot_cost:.5f} -> {last.ot_cost:.5f}")
    if timing:
        click.echo(f"euler_evaluations={result.stats['euler_evaluations']} "
                   f"wall_time_s={result.stats['wall_time_s']:.2f}")
