"""
Plotting Module for the GP flow toolkit
Handles static SVG figures of a run directory: colored matchings,
trajectory fans, training curves and the initial velocity field
(command: plot)
"""

import os

import click
import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from flask import Blueprint, current_app  # noqa: E402

from config import DTYPE, EXIT_CONFIG  # noqa: E402
from utils.checkpoint_utils import load_gp_flow  # noqa: E402
from utils.export_utils import read_matching, read_rows, read_trajectories  # noqa: E402

# Create Blueprint
plotting_bp = Blueprint('plotting', __name__, cli_group=None)

EXPORTS = ('matching.csv', 'trajectories.csv', 'gp_curve.csv', 'nf_curve.csv', 'gp.ckpt')
SVG_SALT = 'gpflow'
VELOCITY_GRID = 41


def _save(fig, path):
    with plt.rc_context({'svg.hashsalt': SVG_SALT, 'svg.fonttype': 'path'}):
        fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)


def angle_hues(points):
    """Hue in [0, 1) from the polar angle of the first two coordinates"""
    return (np.arctan2(points[:, 1], points[:, 0]) + np.pi) / (2 * np.pi)


def plot_matching(matching, path):
    """
    Source points colored by the angle of their Gaussian-side partner:
    the exact OT match, then the base flow image, then the base + GP image
    """
    panels = [('exact OT', matching['target']), ('base', matching['base'])]
    if matching['gp'] is not None:
        panels.append(('base + GP', matching['gp']))
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4), squeeze=False)
    source = matching['source']
    for ax, (title, images) in zip(axes[0], panels):
        ax.scatter(source[:, 0], source[:, 1], c=angle_hues(images), cmap='hsv', vmin=0, vmax=1, s=4)
        ax.set_title(title)
        ax.set_aspect('equal')
    fig.tight_layout()
    _save(fig, path)


def plot_trajectories(times, states, path):
    fig, ax = plt.subplots(figsize=(5, 5))
    for p in range(states.shape[1]):
        ax.plot(states[:, p, 0], states[:, p, 1], lw=0.8, color='tab:blue', alpha=0.7)
    ax.scatter(states[0, :, 0], states[0, :, 1], s=6, color='black', label='t = 0')
    ax.scatter(states[-1, :, 0], states[-1, :, 1], s=6, color='tab:red', label=f't = {times[-1]:g}')
    ax.legend(loc='upper right')
    ax.set_aspect('equal')
    _save(fig, path)


def plot_curves(gp_rows, nf_rows, path):
    panels = []
    if gp_rows:
        panels += [('GP ot_cost', gp_rows, 'ot_cost'), ('composed nll', gp_rows, 'nll'),
                   ('Euler penalty', gp_rows, 'euler_penalty')]
    if nf_rows:
        panels += [('NF held-out nll', nf_rows, 'heldout_nll')]
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.5), squeeze=False)
    for ax, (title, rows, key) in zip(axes[0], panels):
        pts = [(row['epoch'], row[key]) for row in rows if row.get(key) is not None]
        if pts:
            ax.plot(*zip(*pts))
        ax.set_title(title)
        ax.set_xlabel('epoch')
    fig.tight_layout()
    _save(fig, path)


def plot_velocity(gp, path):
    """|v(0, u)| on a grid of the cube, remaining coordinates at 0"""
    grid = np.linspace(-1, 1, VELOCITY_GRID)
    uu, vv = np.meshgrid(grid, grid)
    points = torch.zeros(uu.size, gp.dim, dtype=DTYPE)
    points[:, 0] = torch.as_tensor(uu.ravel(), dtype=DTYPE)
    points[:, 1] = torch.as_tensor(vv.ravel(), dtype=DTYPE)
    with torch.no_grad():
        v = gp.phi.field(points, 0.0)
    speed = v.norm(dim=-1).reshape(uu.shape).numpy()
    fig, ax = plt.subplots(figsize=(5, 4.5))
    mesh = ax.pcolormesh(uu, vv, speed, shading='auto', cmap='viridis')
    fig.colorbar(mesh, ax=ax, label='|v(0, u)|')
    ax.set_aspect('equal')
    _save(fig, path)


@plotting_bp.cli.command('plot')
@click.option('--run-dir', default=None, help='Run directory (default: <RUNS_DIR>/default)')
def plot_command(run_dir):
    """Render the SVG figures of a run directory"""
    run_dir = run_dir or os.path.join(current_app.config['RUNS_DIR'], 'default')
    present = {name for name in EXPORTS if os.path.exists(os.path.join(run_dir, name))}
    missing = [name for name in EXPORTS if name not in present]
    if not present:
        click.echo(f"Error: no exports in {run_dir} (expected any of: {', '.join(EXPORTS)})", err=True)
        raise SystemExit(EXIT_CONFIG)
    if missing:
        click.echo(f"Warning: missing exports: {', '.join(missing)}", err=True)
        current_app.logger.warning("plot: missing exports in %s: %s", run_dir, ', '.join(missing))

    written = []
    if 'matching.csv' in present:
        matching = read_matching(os.path.join(run_dir, 'matching.csv'))
        if matching is not None:
            plot_matching(matching, os.path.join(run_dir, 'matching.svg'))
            written.append('matching.svg')

    if 'trajectories.csv' in present:
        times, states = read_trajectories(os.path.join(run_dir, 'trajectories.csv'))
        if states.size:
            plot_trajectories(times, states, os.path.join(run_dir, 'trajectories.svg'))
            written.append('trajectories.svg')
        else:
            click.echo("Warning: trajectories.csv is empty, skipping the trajectory plot", err=True)

    gp_rows = read_rows(os.path.join(run_dir, 'gp_curve.csv')) if 'gp_curve.csv' in present else []
    nf_rows = read_rows(os.path.join(run_dir, 'nf_curve.csv')) if 'nf_curve.csv' in present else []
    if gp_rows or nf_rows:
        plot_curves(gp_rows, nf_rows, os.path.join(run_dir, 'curves.svg'))
        written.append('curves.svg')

    if 'gp.ckpt' in present:
        plot_velocity(load_gp_flow(os.path.join(run_dir, 'gp.ckpt')), os.path.join(run_dir, 'velocity.svg'))
        written.append('velocity.svg')

    current_app.logger.info("plot: wrote %s", ', '.join(written) or 'nothing')
    click.echo(f"Wrote {', '.join(written) or 'no figures'} to {run_dir}")
