"""
Toy Data Module
Seeded generators for the three 2D toy distributions (eight Gaussians,
two moons, pinwheel). Constants follow the community toy-data script used
by the continuous normalizing flow literature and are frozen here so runs
are reproducible.
"""

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_moons

logger = logging.getLogger(__name__)

DATASETS = ('eight_gaussians', 'two_moons', 'pinwheel')

# eight_gaussians
EIGHT_SCALE = 4.0
EIGHT_NOISE = 0.5
EIGHT_SHRINK = 1.414

# two_moons
MOONS_NOISE = 0.1
MOONS_SCALE = 2.0
MOONS_OFFSET = (-1.0, -0.2)

# pinwheel
PINWHEEL_ARMS = 5
PINWHEEL_RADIAL_STD = 0.3
PINWHEEL_TANGENTIAL_STD = 0.05
PINWHEEL_RATE = 0.25


@dataclass
class DatasetSpec:
    """Which toy distribution to draw, how many points, and the seed"""
    name: str = 'eight_gaussians'
    n: int = 20000
    seed: int = 0


def _eight_gaussians(n, rng):
    angles = np.arange(8) * np.pi / 4
    centers = EIGHT_SCALE * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    idx = rng.integers(0, 8, size=n)
    points = rng.standard_normal((n, 2)) * EIGHT_NOISE + centers[idx]
    return points / EIGHT_SHRINK


def _two_moons(n, rng):
    # sklearn wants a legacy seed; derive it from the generator stream
    legacy_seed = int(rng.integers(0, 2**31 - 1))
    points, _ = make_moons(n_samples=n, noise=MOONS_NOISE, random_state=legacy_seed)
    return points * MOONS_SCALE + np.asarray(MOONS_OFFSET)


def _pinwheel(n, rng):
    rads = np.linspace(0, 2 * np.pi, PINWHEEL_ARMS, endpoint=False)
    features = rng.standard_normal((n, 2)) * np.array([PINWHEEL_RADIAL_STD, PINWHEEL_TANGENTIAL_STD])
    features[:, 0] += 1.0
    labels = np.arange(n) % PINWHEEL_ARMS

    angles = rads[labels] + PINWHEEL_RATE * np.exp(features[:, 0])
    rotations = np.stack([np.cos(angles), -np.sin(angles), np.sin(angles), np.cos(angles)])
    rotations = np.reshape(rotations.T, (-1, 2, 2))

    return 2 * rng.permutation(np.einsum('ti,tij->tj', features, rotations))


_GENERATORS = {
    'eight_gaussians': _eight_gaussians,
    'two_moons': _two_moons,
    'pinwheel': _pinwheel,
}


def sample(spec):
    """
    Draw a toy dataset

    Args:
        spec: DatasetSpec naming the distribution, the count and the seed

    Returns:
        np.ndarray: (n, 2) float64 points, a pure function of (name, n, seed)

    Examples:
        sample(DatasetSpec('pinwheel', 1000, 3)) -> array of shape (1000, 2)
    """
    if spec.name not in _GENERATORS:
        raise ValueError(f"Unknown dataset '{spec.name}'. Expected one of: {', '.join(DATASETS)}")
    if spec.n <= 0:
        raise ValueError(f"Dataset size must be positive, got {spec.n}")

    rng = np.random.default_rng(spec.seed)
    points = _GENERATORS[spec.name](spec.n, rng).astype(np.float64)
    logger.debug("Sampled %d points from %s (seed=%d)", spec.n, spec.name, spec.seed)
    return points


def export_csv(points, path):
    """Write points as CSV with a x1,x2,... header"""
    points = np.asarray(points, dtype=np.float64)
    header = ','.join(f'x{i + 1}' for i in range(points.shape[1]))
    np.savetxt(path, points, delimiter=',', header=header, comments='', fmt='%.17g')


def load_csv(path):
    """Read points written by export_csv"""
    return np.atleast_2d(np.loadtxt(path, delimiter=',', skiprows=1, dtype=np.float64))
