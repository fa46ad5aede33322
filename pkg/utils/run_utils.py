"""
Run utilities for the GP flow CLI
Shared click options, run-directory handling and the mapping from library
errors to process exit codes.
"""

import functools
import json
import os

import click
from flask import current_app

from config import EXIT_CONFIG, EXIT_NUMERICAL, dump_run_config, load_run_config
from core.errors import ConfigError, DimensionMismatchError, GpFlowError, InverseUnavailableError

CONFIG_ERRORS = (ConfigError, DimensionMismatchError, InverseUnavailableError)
# every other library error is a numerical abort
NUMERICAL_ERRORS = (GpFlowError,)


def run_options(fn):
    """--config / --preset / --set / --output-dir / --seed"""
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                     help='RunConfig JSON file'),
        click.option('--preset', default=None, help='Dataset or high_dim preset'),
        click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                     help='Dotted override, e.g. optim.lr=0.01 (repeatable)'),
        click.option('--output-dir', default=None, help='Run directory'),
        click.option('--seed', type=int, default=None, help='Run seed'),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def build_config(config_path, preset, overrides, output_dir, seed):
    """RunConfig from file/preset/overrides; explicit flags win over --set"""
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f'seed={seed}')
    if output_dir is not None:
        overrides.append(f'output_dir={json.dumps(output_dir)}')
    return load_run_config(config_path, overrides, preset)


def prepare_run_dir(config):
    """Create the run directory and write config.json into it"""
    run_dir = config.output_dir or os.path.join(current_app.config['RUNS_DIR'], 'default')
    os.makedirs(run_dir, exist_ok=True)
    dump_run_config(config, os.path.join(run_dir, 'config.json'))
    return run_dir


def handle_run_errors(fn):
    """
    Turn library errors into a one-line message and an exit code:
    2 for configuration problems, 3 for numerical aborts
    """
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CONFIG_ERRORS as e:
            current_app.logger.error("%s: %s", type(e).__name__, e)
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(EXIT_CONFIG)
        except NUMERICAL_ERRORS as e:
            current_app.logger.error("%s: %s", type(e).__name__, e)
            click.echo(f"Numerical abort: {e}", err=True)
            raise SystemExit(EXIT_NUMERICAL)
    return wrapper
