"""
Validation utilities for the GP flow toolkit
Checks run configurations for shape and range consistency before any compute.
Every check returns an (is_valid, errors) tuple.
"""

import math

from config import BASE_FLOW_KINDS, GP_MODES, MAX_DISCRETE_OT
from core.divfree import BOUNDARIES
from core.eulerreg import JVP_METHODS
from core.toydata import DATASETS


def validate_positive_number(value, field_name, allow_zero=False):
    """
    Validate that a value is a finite positive number

    Args:
        value: The value to validate
        field_name: Name of the field (for error messages)
        allow_zero: Accept 0 as well

    Returns:
        tuple: (is_valid, error_message)

    Examples:
        validate_positive_number(0.01, 'optim.lr') -> (True, None)
        validate_positive_number(0, 'optim.epochs', allow_zero=True) -> (True, None)
        validate_positive_number(-1, 'optim.lr') -> (False, 'optim.lr must be greater than 0')
    """
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        return False, f"{field_name} must be a finite number"
    if allow_zero:
        if value < 0:
            return False, f"{field_name} cannot be negative"
    elif value <= 0:
        return False, f"{field_name} must be greater than 0"
    return True, None


def validate_integer(value, field_name, minimum=0):
    """Validate an integer field with a lower bound"""
    if isinstance(value, bool) or not isinstance(value, int):
        return False, f"{field_name} must be an integer"
    if value < minimum:
        return False, f"{field_name} must be at least {minimum}"
    return True, None


def validate_choice(value, field_name, choices):
    if value not in choices:
        return False, f"{field_name} must be one of: {', '.join(map(str, choices))} (got {value!r})"
    return True, None


def validate_widths(widths, field_name):
    """Hidden layer widths: a nonempty list of positive integers"""
    if not widths:
        return False, f"{field_name} must list at least one hidden width"
    if any(isinstance(w, bool) or not isinstance(w, int) or w <= 0 for w in widths):
        return False, f"{field_name} must contain positive integers"
    return True, None


def validate_run_config(config):
    """
    Validate a RunConfig

    Args:
        config: RunConfig instance

    Returns:
        tuple: (is_valid, errors) with errors a list of messages
    """
    checks = [
        validate_choice(config.dataset.name, 'dataset.name', DATASETS),
        validate_integer(config.dataset.n, 'dataset.n', minimum=1),
        validate_integer(config.dataset.seed, 'dataset.seed'),

        validate_choice(config.base.kind, 'base.kind', BASE_FLOW_KINDS),
        validate_integer(config.base.dim, 'base.dim', minimum=2),
        validate_integer(config.base.n_layers, 'base.n_layers'),
        validate_widths(config.base.hidden, 'base.hidden'),
        validate_integer(config.base.epochs, 'base.epochs'),
        validate_positive_number(config.base.lr, 'base.lr'),
        validate_integer(config.base.batch_size, 'base.batch_size', minimum=1),

        validate_choice(config.gp.mode, 'gp.mode', GP_MODES),
        validate_widths(config.gp.hidden, 'gp.hidden'),
        validate_integer(config.gp.n_steps, 'gp.n_steps', minimum=1),
        validate_positive_number(config.gp.t_final, 'gp.t_final'),
        validate_choice(config.gp.boundary, 'gp.boundary', BOUNDARIES),
        validate_positive_number(config.gp.final_scale, 'gp.final_scale', allow_zero=True),
        validate_choice(config.gp.orientation, 'gp.orientation', (1, -1)),

        validate_positive_number(config.euler.lambda0, 'euler.lambda0', allow_zero=True),
        validate_positive_number(config.euler.decay_factor, 'euler.decay_factor'),
        validate_integer(config.euler.n_decays, 'euler.n_decays'),
        validate_positive_number(config.euler.dt, 'euler.dt'),
        validate_integer(config.euler.probes_per_point, 'euler.probes_per_point', minimum=1),
        validate_choice(config.euler.jvp, 'euler.jvp', JVP_METHODS),

        validate_positive_number(config.optim.lr, 'optim.lr'),
        validate_integer(config.optim.batch_size, 'optim.batch_size', minimum=1),
        validate_integer(config.optim.epochs, 'optim.epochs'),
        validate_integer(config.optim.epoch_samples, 'optim.epoch_samples', minimum=1),
        validate_integer(config.optim.monitor_size, 'optim.monitor_size', minimum=1),

        validate_integer(config.seed, 'seed'),
        validate_integer(config.checkpoint_every, 'checkpoint_every'),
        validate_integer(config.report_every, 'report_every', minimum=1),
        validate_integer(config.n_eval, 'n_eval', minimum=2),
    ]
    errors = [message for ok, message in checks if not ok]

    if config.euler.decay_period is not None:
        ok, message = validate_integer(config.euler.decay_period, 'euler.decay_period', minimum=1)
        if not ok:
            errors.append(message)

    holdout = config.base.holdout
    if isinstance(holdout, bool) or not isinstance(holdout, (int, float)) or not 0 <= holdout < 1:
        errors.append("base.holdout must be in [0, 1)")

    # shape consistency
    if config.base.kind == 'coupling' and config.base.dim != 2:
        errors.append("base.dim must be 2 for a coupling flow trained on 2D toy data")
    if config.base.kind == 'scale' and isinstance(config.base.scale, (int, float)) and abs(config.base.scale) < 1e-12:
        errors.append("base.scale must be non-zero")
    if config.gp.mode == 'forward' and config.base.dim != 2:
        errors.append("gp.mode 'forward' fits on 2D toy data and needs base.dim == 2")
    if isinstance(config.n_eval, int) and config.n_eval > MAX_DISCRETE_OT:
        errors.append(f"n_eval cannot exceed {MAX_DISCRETE_OT} (exact discrete OT limit)")

    return len(errors) == 0, errors
