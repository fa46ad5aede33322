"""
NF Training Module for the GP flow toolkit
Handles toy dataset export and base flow construction/training
(commands: sample-data, train-nf)
"""

import os

import torch
from flask import Blueprint, current_app

from config import DTYPE
from core.baseflow import (
    NfTrainConfig,
    build_coupling_flow,
    build_synthetic_flow,
    identity_flow,
    nll,
    scale_flow,
    train_nf,
)
from core.toydata import export_csv, sample
from utils.checkpoint_utils import save_base_flow, update_manifest
from utils.export_utils import write_nf_curve
from utils.run_utils import build_config, handle_run_errors, prepare_run_dir, run_options

# Create Blueprint
nf_training_bp = Blueprint('nf_training', __name__, cli_group=None)


def build_base_flow(config):
    """Untrained base flow described by config.base"""
    spec = config.base
    if spec.kind == 'identity':
        return identity_flow(spec.dim)
    if spec.kind == 'scale':
        return scale_flow(spec.dim, spec.scale)
    if spec.kind == 'synthetic':
        return build_synthetic_flow(spec.dim, spec.n_layers, config.seed, spec.invertible)
    return build_coupling_flow(spec.dim, spec.n_layers, tuple(spec.hidden), config.seed)


@nf_training_bp.cli.command('sample-data')
@run_options
@handle_run_errors
def sample_data_command(config_path, preset, overrides, output_dir, seed):
    """Write the configured toy dataset to dataset.csv"""
    config = build_config(config_path, preset, overrides, output_dir, seed)
    run_dir = prepare_run_dir(config)

    points = sample(config.dataset)
    export_csv(points, os.path.join(run_dir, 'dataset.csv'))
    update_manifest(run_dir, 'sample-data', config.seed, ['config.json', 'dataset.csv'])
    current_app.logger.info("Wrote %d %s points to %s", len(points), config.dataset.name, run_dir)


@nf_training_bp.cli.command('train-nf')
@run_options
@handle_run_errors
def train_nf_command(config_path, preset, overrides, output_dir, seed):
    """Build the base flow, train it when it is a coupling flow, and checkpoint it"""
    config = build_config(config_path, preset, overrides, output_dir, seed)
    run_dir = prepare_run_dir(config)
    flow = build_base_flow(config)

    data = None
    if config.base.dim == 2:
        data = torch.as_tensor(sample(config.dataset), dtype=DTYPE)

    if config.base.kind == 'coupling':
        nf_config = NfTrainConfig(
            epochs=config.base.epochs,
            lr=config.base.lr,
            batch_size=config.base.batch_size,
            holdout=config.base.holdout,
            seed=config.seed,
            progress=current_app.config['PROGRESS'],
            report_every=config.report_every,
        )
        flow, curve = train_nf(flow, data, nf_config)
    elif data is not None:
        with torch.no_grad():
            curve = [{'epoch': 0, 'train_nll': float(nll(flow, data)), 'heldout_nll': None}]
    else:
        curve = []

    save_base_flow(os.path.join(run_dir, 'nf.ckpt'), flow)
    write_nf_curve(os.path.join(run_dir, 'nf_curve.csv'), curve)
    update_manifest(run_dir, 'train-nf', config.seed, ['config.json', 'nf.ckpt', 'nf_curve.csv'])

    if curve:
        current_app.logger.info("train-nf done: heldout_nll=%s after %d epochs",
                                curve[-1]['heldout_nll'], curve[-1]['epoch'])
