import pytest
import torch

from app import create_app


@pytest.fixture
def app(tmp_path):
    runs = tmp_path / 'runs'
    runs.mkdir()
    app = create_app({'TESTING': True, 'RUNS_DIR': str(runs), 'LOG_LEVEL': 'WARNING'})
    yield app


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def runs_dir(app):
    return app.config['RUNS_DIR']


def rotation_field(x, t):
    """v = (x2, -x1): rotation by -t radians"""
    return torch.stack([x[..., 1], -x[..., 0]], dim=-1)


def disc_points(n, radius=0.9, seed=0):
    generator = torch.Generator().manual_seed(seed)
    angles = 2 * torch.pi * torch.rand(n, generator=generator, dtype=torch.float64)
    radii = radius * torch.rand(n, generator=generator, dtype=torch.float64).sqrt()
    return torch.stack([radii * torch.cos(angles), radii * torch.sin(angles)], dim=-1)
